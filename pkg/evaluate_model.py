"""
Evaluate predictions against scenes (shortcut for `python -m pip_motion eval`).

Usage: python evaluate_model.py --scenes data/scenes.jsonl --preds data/preds.jsonl --report data/report.json
"""
import sys

from pip_motion.cli import run

if __name__ == "__main__":
    sys.exit(run(["eval", *sys.argv[1:]]))
