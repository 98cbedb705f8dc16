# Keeps the repository root importable so `import diffnam` works without installation.
