"""
Toy-scale training (shortcut for `python -m pip_motion train`).

Usage: python train_model.py --scenes data/scenes.jsonl --out data/params.json --log data/loss.csv
"""
import sys

from pip_motion.cli import run

if __name__ == "__main__":
    sys.exit(run(["train", *sys.argv[1:]]))
