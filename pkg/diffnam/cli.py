"""
Command-line entry point: `python -m diffnam <command> [flags]`.

Every command accepts --seed, --config, --preset, --set key=value and
--out-dir, writes its outputs under the output directory and finishes with a
<command>.run.json provenance record. Exit codes: 0 success, 2 contract or
configuration violation, 3 malformed or missing files.
"""

import argparse
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog
from pydantic import ValidationError

from . import dsp, evaluation, seq2seq, synthdata
from .align import (MonophoneHMM, durations_from_json, durations_to_json, dtw, train_aligner,
                    viterbi_align)
from .diffusion import DiffNamModel
from .errors import ConfigError, ContractError, FormatError
from .formats import file_sha256, read_features, write_json, write_jsonl
from .logs import configure_logging
from .models import Channel, Durations, MelSpectrogram, NamInput, PhonemeSeq, RunRecord, SimulationMethod
from .seq2seq import Seq2SeqExample, Seq2SeqModel
from .settings import PRESETS, PipelineConfig, load_config
from .simulation import SimulationResult, durations_for, simulate
from .units import kmeans_fit

logger = structlog.get_logger()

EXIT_OK = 0
EXIT_CONTRACT = 2
EXIT_IO = 3


@dataclass
class RunContext:
    command: str
    config: PipelineConfig
    out_dir: Path
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: List[str] = field(default_factory=list)

    @property
    def seed(self) -> int:
        return self.config.seed

    def require(self, path: Optional[str], flag: str) -> Path:
        """Resolve an input path; record its hash if it is a file."""
        if path is None:
            raise ConfigError(flag, "is required")
        resolved = Path(path).resolve()
        if not resolved.exists():
            raise FileNotFoundError(f"{flag}: {resolved} does not exist")
        if resolved.is_file():
            self.inputs[str(resolved)] = file_sha256(resolved)
        return resolved

    def record_input(self, path: Path) -> Path:
        self.inputs[str(path)] = file_sha256(path)
        return path

    def output(self, relative: str) -> Path:
        path = self.out_dir / relative
        path.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(str(path))
        return path


# ============================================================================
# SHARED HELPERS
# ============================================================================

def _load_corpus(ctx: RunContext, data: Optional[str]) -> synthdata.Corpus:
    data_dir = ctx.require(data or str(ctx.out_dir / "data"), "--data")
    ctx.require(str(data_dir / "manifest.jsonl"), "--data")
    return synthdata.read_corpus(data_dir)


def _split(corpus: synthdata.Corpus, holdout: float) -> Tuple[list, list]:
    """Deterministic split: the last `holdout` share of utterances is held out."""
    if not 0.0 <= holdout < 1.0:
        raise ConfigError("--holdout", "must lie in [0, 1)")
    utts = list(corpus)
    n_test = int(round(holdout * len(utts)))
    if holdout > 0 and len(utts) > 1:
        n_test = max(1, n_test)
    return utts[:len(utts) - n_test], utts[len(utts) - n_test:]


def _write_durations(path: Path, alignments: Dict[str, Tuple[PhonemeSeq, Durations]]) -> None:
    lines = []
    for utt_id, (phonemes, durations) in alignments.items():
        record = json.loads(durations_to_json(phonemes, durations))
        record["utt_id"] = utt_id
        lines.append(json.dumps(record, sort_keys=True))
    path.write_text("".join(line + "\n" for line in lines))


def _read_durations(ctx: RunContext, path: Optional[str],
                    inventory_size: int) -> Dict[str, Tuple[PhonemeSeq, Durations]]:
    if path is None:
        return {}
    resolved = ctx.require(path, "--durations")
    alignments = {}
    for line in resolved.read_text().splitlines():
        if not line.strip():
            continue
        record = json.loads(line)
        alignments[record.pop("utt_id")] = durations_from_json(json.dumps(record), inventory_size)
    return alignments


def _mel(frames: np.ndarray, config: PipelineConfig) -> MelSpectrogram:
    return MelSpectrogram(frames=frames, hop=config.hop, window=config.window,
                          sample_rate=config.sample_rate, n_mels=frames.shape[1], log_floor=config.log_floor)


def _transcript(inventory: synthdata.ToyInventory, labels: Sequence[int]) -> str:
    return " ".join(inventory.symbols[label - 1] for label in labels)


def _nam_mel_dir(ctx: RunContext, mels: Optional[str], nam_input: NamInput) -> Optional[Path]:
    """Directory of <utt>.nam.namf log-mels when the converter reads NAM audio; None for raw features."""
    if nam_input is NamInput.FEATURES:
        return None
    return ctx.require(mels or str(ctx.out_dir / "mels"), "--mels")


def _nam_features(ctx: RunContext, utt: synthdata.ParallelUtterance, mel_dir: Optional[Path]) -> np.ndarray:
    if mel_dir is None:
        return utt.nam
    path = ctx.require(str(mel_dir / f"{utt.utt_id}.nam.namf"), "--mels")
    frames = dsp.load_mel(path, ctx.config.log_floor).frames
    if frames.shape[0] != utt.n_frames:
        raise ContractError(f"{path}: {frames.shape[0]} NAM mel frames for a {utt.n_frames}-frame utterance")
    return frames


def _model_nam_input(model: Seq2SeqModel) -> NamInput:
    return NamInput(model.metadata.get("nam_input", NamInput.FEATURES.value))


# ============================================================================
# COMMANDS
# ============================================================================

class BaseCommand:
    name = ""
    description = ""

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        pass

    def execute(self, args: argparse.Namespace, ctx: RunContext) -> None:
        raise NotImplementedError


class GenDataCommand(BaseCommand):
    name = "gen-data"
    description = "Generate a synthetic parallel NAM/whisper/lip/mel corpus"

    def add_arguments(self, parser):
        parser.add_argument("--n", type=int, default=None, help="number of utterances (default: n_utts)")
        parser.add_argument("--no-audio", action="store_true",
                            help="skip Griffin-Lim rendering of the mel targets and NAM channel")

    def execute(self, args, ctx):
        config = ctx.config
        n_utts = config.n_utts if args.n is None else args.n
        corpus = synthdata.gen_corpus(ctx.seed, n_utts, config=config)
        manifest = synthdata.write_corpus(corpus, ctx.out_dir / "data", config)
        ctx.outputs.append(str(manifest))
        if not args.no_audio:
            for utt in corpus:
                dsp.save_wav(synthdata.render_audio(utt, config), ctx.output(f"data/audio/{utt.utt_id}.wav"))
                nam_audio = synthdata.render_audio(utt, config, "nam", corpus.inventory)
                dsp.save_wav(nam_audio, ctx.output(f"data/audio/{utt.utt_id}.nam.wav"))


class ExtractMelCommand(BaseCommand):
    name = "extract-mel"
    description = "Compute log-mel spectrograms from the corpus speech and NAM audio"

    def add_arguments(self, parser):
        parser.add_argument("--data", help="corpus directory (default: <out-dir>/data)")

    def execute(self, args, ctx):
        config = ctx.config
        corpus = _load_corpus(ctx, args.data)
        data_dir = Path(args.data or ctx.out_dir / "data").resolve()
        counts = {}
        for utt in corpus:
            for stem in (utt.utt_id, f"{utt.utt_id}.nam"):
                wav = ctx.require(str(data_dir / "audio" / f"{stem}.wav"), "--data")
                audio = dsp.load_wav(wav, config.sample_rate)
                mel = dsp.mel_spectrogram(audio, config.n_mels, config.hop, config.window, config.n_fft,
                                          config.log_floor)
                dsp.save_mel(mel, ctx.output(f"mels/{stem}.namf"))
            counts[utt.utt_id] = mel.n_frames
        write_json(ctx.output("mels/frames.json"), counts)


class TrainAlignerCommand(BaseCommand):
    name = "train-aligner"
    description = "Train the monophone HMM aligner with Viterbi-EM"

    def add_arguments(self, parser):
        parser.add_argument("--data", help="corpus directory (default: <out-dir>/data)")
        parser.add_argument("--channel", choices=[c.value for c in Channel], default=None,
                            help="feature channel to align on (default: align_channel)")

    def execute(self, args, ctx):
        config = ctx.config
        corpus = _load_corpus(ctx, args.data)
        channel = args.channel or config.align_channel.value
        groups: Dict[str, list] = {}
        for utt in corpus:
            key = str(utt.speaker) if config.per_speaker else "all"
            groups.setdefault(key, []).append((utt.channel(channel), utt.phonemes))

        index = {"channel": channel, "per_speaker": config.per_speaker, "models": {}}
        for key, items in sorted(groups.items()):
            hmm = train_aligner(items, config.aligner_iterations, corpus.inventory.size, config.variance_floor)
            filename = f"aligner-{key}.namc"
            hmm.save(ctx.output(f"aligner/{filename}"), {"channel": channel, "group": key,
                                                         "config_hash": config.config_hash()})
            index["models"][key] = filename
            logger.info("aligner_trained", group=key, utterances=len(items),
                        loglik=hmm.log_likelihoods[-1] if hmm.log_likelihoods else None)
        write_json(ctx.output("aligner/index.json"), index)


class AlignCommand(BaseCommand):
    name = "align"
    description = "Viterbi-align every utterance and write phoneme durations"

    def add_arguments(self, parser):
        parser.add_argument("--data", help="corpus directory (default: <out-dir>/data)")
        parser.add_argument("--aligner", help="aligner index.json (default: <out-dir>/aligner/index.json)")

    def execute(self, args, ctx):
        corpus = _load_corpus(ctx, args.data)
        index_path = ctx.require(args.aligner or str(ctx.out_dir / "aligner" / "index.json"), "--aligner")
        index = json.loads(index_path.read_text())
        models = {key: MonophoneHMM.load(ctx.record_input(index_path.parent / name))
                  for key, name in index["models"].items()}

        alignments, within, total = {}, 0, 0
        for utt in corpus:
            key = str(utt.speaker) if index["per_speaker"] else "all"
            if key not in models:
                raise ContractError(f"no aligner trained for speaker {utt.speaker}")
            durations = viterbi_align(models[key], utt.channel(index["channel"]), utt.phonemes)
            alignments[utt.utt_id] = (utt.phonemes, durations)
            errors = np.abs(np.cumsum(durations.frames) - np.cumsum(utt.durations.frames))
            within += int(np.sum(errors <= 1))
            total += len(errors)
        _write_durations(ctx.output("durations.jsonl"), alignments)
        accuracy = within / total if total else 0.0
        write_json(ctx.output("align.json"), {"boundary_accuracy": accuracy, "n": len(alignments)})
        logger.info("aligned", utterances=len(alignments), boundary_accuracy=accuracy)


class DtwCommand(BaseCommand):
    name = "dtw"
    description = "Dynamic time warping path between two feature files"

    def add_arguments(self, parser):
        parser.add_argument("--a", required=True, help="first NAMF feature file")
        parser.add_argument("--b", required=True, help="second NAMF feature file")
        parser.add_argument("--distance", default="euclidean", help="scipy cdist metric (default: euclidean)")

    def execute(self, args, ctx):
        a, _ = read_features(ctx.require(args.a, "--a"))
        b, _ = read_features(ctx.require(args.b, "--b"))
        path = dtw(a, b, args.distance)
        write_json(ctx.output("dtw.json"), {"cost": path.cost, "pairs": [list(p) for p in path.pairs]})
        logger.info("dtw_done", cost=path.cost, length=len(path.pairs))


class TrainDiffusionCommand(BaseCommand):
    name = "train-diffusion"
    description = "Train the conditional diffusion model on (lip, NAM, text) -> mel"

    def add_arguments(self, parser):
        parser.add_argument("--data", help="corpus directory (default: <out-dir>/data)")
        parser.add_argument("--durations", help="durations.jsonl from `align` (default: planted durations)")
        parser.add_argument("--steps", type=int, default=None, help="training steps (default: diffusion_train_steps)")

    def execute(self, args, ctx):
        config = ctx.config
        corpus = _load_corpus(ctx, args.data)
        alignments = _read_durations(ctx, args.durations, corpus.inventory.size)
        model = DiffNamModel(config, n_phonemes=corpus.inventory.size, seed=ctx.seed)
        mels, conds = [], []
        for utt in corpus:
            mels.append(utt.mel)
            conds.append(model.conditioner(utt.lip, utt.nam, utt.phonemes, durations_for(utt, alignments)))
        history = model.fit(mels, conds, steps=args.steps)
        model.save(ctx.output("diffnam.namc"))
        logger.info("diffusion_trained", steps=len(history), final_loss=history[-1])


def _write_simulation(ctx: RunContext, corpus: synthdata.Corpus, result: SimulationResult, wav: bool) -> None:
    config = ctx.config
    for utt in corpus:
        mel = _mel(result.mels[utt.utt_id], config)
        dsp.save_mel(mel, ctx.output(f"simulated/{utt.utt_id}.namf"))
        if wav:
            audio = dsp.griffin_lim(mel, config.griffin_lim_iters, config.n_fft)
            dsp.save_wav(audio, ctx.output(f"simulated/{utt.utt_id}.wav"))
    mean_l1 = result.mean_l1(corpus)
    write_json(ctx.output("simulated/summary.json"),
               {"method": result.method.value, "mean_l1": mean_l1, "n": len(result.mels)})
    logger.info("simulation_written", method=result.method.value, utterances=len(result.mels), mean_l1=mean_l1)


class SampleCommand(BaseCommand):
    name = "sample"
    description = "Simulate ground-truth mels for every utterance with the diffusion model"

    def add_arguments(self, parser):
        parser.add_argument("--data", help="corpus directory (default: <out-dir>/data)")
        parser.add_argument("--model", help="diffusion checkpoint (default: <out-dir>/diffnam.namc)")
        parser.add_argument("--durations", help="durations.jsonl from `align` (default: planted durations)")
        parser.add_argument("--guidance", type=float, default=None, help="guidance scale w (default: guidance_scale)")
        parser.add_argument("--wav", action="store_true", help="also render each simulated mel to WAV")

    def execute(self, args, ctx):
        corpus = _load_corpus(ctx, args.data)
        model = DiffNamModel.load(ctx.require(args.model or str(ctx.out_dir / "diffnam.namc"), "--model"))
        alignments = _read_durations(ctx, args.durations, corpus.inventory.size)
        result = simulate(SimulationMethod.DIFFUSION, corpus, ctx.config, ctx.seed, alignments,
                          diffusion=model, guidance=args.guidance)
        _write_simulation(ctx, corpus, result, args.wav)


class SimulateCommand(BaseCommand):
    name = "simulate"
    description = "Simulate ground-truth mels with a non-diffusion route (tts, units, dtw, cross-attention)"

    def add_arguments(self, parser):
        parser.add_argument("--data", help="corpus directory (default: <out-dir>/data)")
        parser.add_argument("--method", default=SimulationMethod.TTS.value,
                            choices=[m.value for m in SimulationMethod if m is not SimulationMethod.DIFFUSION],
                            help="simulation route (default: tts)")
        parser.add_argument("--durations", help="durations.jsonl from `align` (default: planted durations)")
        parser.add_argument("--wav", action="store_true", help="also render each simulated mel to WAV")

    def execute(self, args, ctx):
        corpus = _load_corpus(ctx, args.data)
        alignments = _read_durations(ctx, args.durations, corpus.inventory.size)
        result = simulate(SimulationMethod(args.method), corpus, ctx.config, ctx.seed, alignments)
        _write_simulation(ctx, corpus, result, args.wav)


class TrainSeq2SeqCommand(BaseCommand):
    name = "train-seq2seq"
    description = "Train the NAM-to-mel Seq2Seq model with MSE + CTC (+ unit) losses"

    def add_arguments(self, parser):
        parser.add_argument("--data", help="corpus directory (default: <out-dir>/data)")
        parser.add_argument("--targets", help="directory of simulated <utt>.namf mels (default: corpus mel targets)")
        parser.add_argument("--mels", help="NAM-audio log-mels from `extract-mel` (default: <out-dir>/mels)")
        parser.add_argument("--holdout", type=float, default=0.2, help="share of utterances held out for eval")
        parser.add_argument("--epochs", type=int, default=None, help="training epochs (default: epochs)")

    def execute(self, args, ctx):
        config = ctx.config
        corpus = _load_corpus(ctx, args.data)
        train_utts, _ = _split(corpus, args.holdout)
        mel_dir = _nam_mel_dir(ctx, args.mels, config.nam_input)
        target_dir = ctx.require(args.targets, "--targets") if args.targets else None

        targets = []
        for utt in train_utts:
            if target_dir is None:
                targets.append(utt.mel)
            else:
                targets.append(dsp.load_mel(ctx.require(str(target_dir / f"{utt.utt_id}.namf"), "--targets"),
                                            config.log_floor).frames)

        codebook = None
        if config.n_units > 0 and config.lambda_units > 0:
            codebook = kmeans_fit(np.concatenate(targets), config.n_units, config.kmeans_iterations, ctx.seed)
            codebook.save(ctx.output("codebook.namk"))

        examples = [
            Seq2SeqExample(
                features=_nam_features(ctx, utt, mel_dir), target=target, utt_id=utt.utt_id,
                labels=[i + 1 for i in utt.phonemes.ids],
                units=None if codebook is None else codebook.encode(target).tolist(),
            )
            for utt, target in zip(train_utts, targets)
        ]
        model = Seq2SeqModel(examples[0].features.shape[1], targets[0].shape[1], corpus.inventory.size,
                             0 if codebook is None else codebook.size, config, seed=ctx.seed)
        history = seq2seq.train(model, examples, epochs=args.epochs)
        model.save(ctx.output("seq2seq.namc"), {"holdout": args.holdout, "nam_input": config.nam_input.value})
        logger.info("seq2seq_trained", epochs=len(history.total), final_loss=history.total[-1],
                    skipped=history.skipped)


class ConvertCommand(BaseCommand):
    name = "convert"
    description = "Convert NAM input (corpus features or a WAV file) to speech"

    def add_arguments(self, parser):
        parser.add_argument("--model", help="seq2seq checkpoint (default: <out-dir>/seq2seq.namc)")
        parser.add_argument("--data", help="corpus directory whose NAM features are converted")
        parser.add_argument("--mels", help="directory of NAM-audio log-mels (default: <out-dir>/mels)")
        parser.add_argument("--wav", help="NAM WAV file to convert instead of corpus features")
        parser.add_argument("--limit", type=int, default=None, help="convert only the first N utterances")

    def execute(self, args, ctx):
        config = ctx.config
        model = Seq2SeqModel.load(ctx.require(args.model or str(ctx.out_dir / "seq2seq.namc"), "--model"))
        if args.wav:
            audio = dsp.load_wav(ctx.require(args.wav, "--wav"), config.sample_rate)
            dsp.save_wav(seq2seq.convert(model, audio), ctx.output(f"converted/{Path(args.wav).stem}.wav"))
            return
        corpus = _load_corpus(ctx, args.data)
        mel_dir = _nam_mel_dir(ctx, args.mels, _model_nam_input(model))
        for utt in list(corpus)[:args.limit]:
            mel = _mel(seq2seq.convert_features(model, _nam_features(ctx, utt, mel_dir)), config)
            dsp.save_mel(mel, ctx.output(f"converted/{utt.utt_id}.namf"))
            audio = dsp.griffin_lim(mel, config.griffin_lim_iters, config.n_fft)
            dsp.save_wav(audio, ctx.output(f"converted/{utt.utt_id}.wav"))


class EvalCommand(BaseCommand):
    name = "eval"
    description = "WER/CER of transcripts decoded from NAM input, against a shuffled-weights control"

    def add_arguments(self, parser):
        parser.add_argument("--data", help="corpus directory (default: <out-dir>/data)")
        parser.add_argument("--model", help="seq2seq checkpoint (default: <out-dir>/seq2seq.namc)")
        parser.add_argument("--mels", help="directory of NAM-audio log-mels (default: <out-dir>/mels)")
        parser.add_argument("--all", action="store_true", help="score every utterance, not only the held-out share")

    def execute(self, args, ctx):
        corpus = _load_corpus(ctx, args.data)
        model = Seq2SeqModel.load(ctx.require(args.model or str(ctx.out_dir / "seq2seq.namc"), "--model"))
        if args.all:
            utts = list(corpus)
        else:
            holdout = model.metadata.get("holdout", 0.2)
            _, utts = _split(corpus, holdout)
            utts = utts or list(corpus)
        control = seq2seq.shuffled_copy(model, ctx.seed)
        mel_dir = _nam_mel_dir(ctx, args.mels, _model_nam_input(model))

        per_utt, pairs, control_pairs = [], [], []
        for utt in utts:
            features = _nam_features(ctx, utt, mel_dir)
            hyp = _transcript(corpus.inventory, seq2seq.transcribe(model, features))
            pairs.append((utt.text, hyp))
            control_pairs.append((utt.text, _transcript(corpus.inventory, seq2seq.transcribe(control, features))))
            per_utt.append(evaluation.utterance_error_rates(utt.text, hyp, utt.utt_id))
        rates = evaluation.corpus_error_rates(pairs)
        control_rates = evaluation.corpus_error_rates(control_pairs)
        write_jsonl(ctx.output("eval/utterances.jsonl"), per_utt)
        report = rates.model_dump(mode="json", exclude={"utt_id"})
        report["control"] = control_rates.model_dump(mode="json", exclude={"utt_id"})
        write_json(ctx.output("eval/report.json"), report)
        logger.info("evaluated", wer=rates.wer, cer=rates.cer, control_wer=control_rates.wer, n=rates.n)


class CommandRegistry:
    def __init__(self):
        self.commands: Dict[str, BaseCommand] = {
            cmd.name: cmd for cmd in (
                GenDataCommand(), ExtractMelCommand(), TrainAlignerCommand(), AlignCommand(),
                DtwCommand(), TrainDiffusionCommand(), SampleCommand(), SimulateCommand(),
                TrainSeq2SeqCommand(), ConvertCommand(), EvalCommand(),
            )
        }

    def get_command(self, name: str) -> Optional[BaseCommand]:
        return self.commands.get(name)

    def get_available_commands(self) -> List[str]:
        return list(self.commands)

    def get_command_descriptions(self) -> Dict[str, str]:
        return {name: cmd.description for name, cmd in self.commands.items()}


command_registry = CommandRegistry()


# ============================================================================
# ENTRY POINT
# ============================================================================

def _parse_overrides(pairs: Sequence[str]) -> Dict[str, str]:
    overrides = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise ConfigError("--set", f"expected key=value, got {pair!r}")
        overrides[key.strip()] = value.strip()
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffnam", description="Desk-scale NAM-to-speech pipeline")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, description in command_registry.get_command_descriptions().items():
        sub = subparsers.add_parser(name, help=description, description=description)
        sub.add_argument("--seed", type=int, default=None, help="root seed (overrides the config)")
        sub.add_argument("--config", default=None, help="key=value configuration file")
        sub.add_argument("--preset", default="desk", choices=sorted(PRESETS), help="named configuration preset")
        sub.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        sub.add_argument("--out-dir", default=None, help="output directory (default: out_dir)")
        command_registry.get_command(name).add_arguments(sub)
    return parser


def run(args: argparse.Namespace) -> RunRecord:
    overrides = _parse_overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    config = load_config(args.config, overrides, args.preset)
    out_dir = Path(args.out_dir or config.out_dir).resolve()
    out_dir.mkdir(parents=True, exist_ok=True)

    ctx = RunContext(args.command, config, out_dir)
    if args.config:
        ctx.require(args.config, "--config")
    started = time.perf_counter()
    logger.info("command_started", command=args.command, out_dir=str(out_dir), seed=config.seed,
                config_hash=config.config_hash())
    command_registry.get_command(args.command).execute(args, ctx)

    record = RunRecord(
        command=args.command,
        config_hash=config.config_hash(),
        seed=config.seed,
        inputs=ctx.inputs,
        outputs=ctx.outputs,
        wall_time=time.perf_counter() - started,
    )
    write_json(out_dir / f"{args.command}.run.json", record.model_dump(mode="json"))
    logger.info("command_finished", command=args.command, wall_time=record.wall_time, outputs=len(ctx.outputs))
    return record


def main(argv: Optional[Sequence[str]] = None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        run(args)
    except ContractError as e:
        logger.error("contract_violation", command=args.command, error=str(e))
        return EXIT_CONTRACT
    except (FormatError, OSError, ValidationError, json.JSONDecodeError) as e:
        logger.error("io_failure", command=args.command, error=str(e))
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
