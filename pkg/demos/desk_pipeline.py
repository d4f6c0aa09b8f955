"""Run the whole command-line pipeline on a small synthetic corpus.

Generates data, trains stage 1 for 300 and stage 2 for 1500 iterations, enhances
the validation images and scores them. The run is short, so expect a
modest gain over the dark inputs; the acceptance suite trains at full desk
scale.

    python3 demos/desk_pipeline.py [work_dir]
"""

import shutil
import sys
from pathlib import Path

from latent_retinex.cli import main

work = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_pipeline")
work.mkdir(exist_ok=True)
config = work / "run.cfg"
config.write_text(
    "seed = 0\n"
    f"data_dir = {work / 'data'}\n"
    "stage1_pairs = 16\n"
    "stage2_low = 32\n"
    "stage2_high = 32\n"
    "val_pairs = 4\n"
    "stage1_iterations = 300\n"
    "stage2_iterations = 1500\n"
    "lambda_1 = 0\n"
)


def run(*argv):
    print("$ latent-retinex", " ".join(argv))
    code = main(["-v", *argv, "--config", str(config)])
    if code:
        sys.exit(code)


run("gen-data", "--out", str(work / "data"))

# the validation split interleaves low-light input (even) and ground truth (odd)
val = sorted((work / "data" / "val").glob("*.png"))
for folder, files in (("val_low", val[0::2]), ("val_gt", val[1::2])):
    (work / folder).mkdir(exist_ok=True)
    for f in files:
        shutil.copy(f, work / folder / f.name)

run("train", "--stage", "1", "--out", str(work / "stage1"))
run("train", "--stage", "2", "--ckpt", str(work / "stage1" / "stage1.ckpt"), "--out", str(work / "stage2"))
ckpt = str(work / "stage2" / "stage2.ckpt")
run("enhance", "--ckpt", ckpt, "--input", str(work / "val_low"), "--out", str(work / "enhanced"))
run("eval", "--input", str(work / "val_low"), "--gt", str(work / "val_gt"), "--out", str(work / "eval_dark"))
run("eval", "--ckpt", ckpt, "--input", str(work / "val_low"), "--gt", str(work / "val_gt"),
    "--out", str(work / "eval_enhanced"))
for name in ("eval_dark", "eval_enhanced"):
    print(name)
    print((work / name / "metrics.csv").read_text())
