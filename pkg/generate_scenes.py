"""
Generate synthetic scenes (shortcut for `python -m pip_motion gen`).

Usage: python generate_scenes.py --num 50 --out data/scenes.jsonl [--config config.json] [--seed 0]
"""
import sys

from pip_motion.cli import run

if __name__ == "__main__":
    sys.exit(run(["gen", *sys.argv[1:]]))
