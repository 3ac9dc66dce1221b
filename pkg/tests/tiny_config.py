"""A config small enough to run every CLI verb in seconds."""
from pathlib import Path

TINY = """\
data.T = 16
data.D = 8
data.n_videos = 8
data.transient_min = 2
data.transient_max = 3
data.sustained_min = 4
data.sustained_max = 8
data.test_T = 40
data.test_n_videos = 6
sens.steps = 3
cons.steps = 3
unified.steps = 3
sens.batch_size = 4
cons.batch_size = 4
unified.batch_size = 4
infer.window_len = 16
infer.stride = 8
"""


def write_tiny_config(root: Path, seed: int = 0) -> Path:
    root = Path(root)
    text = TINY + "".join(f"{k} = {root / v}\n" for k, v in [
        ("data.dir", "data"), ("train.output_dir", "models"),
        ("infer.output_dir", "scores"), ("eval.output_dir", "eval")])
    path = root / "run.cfg"
    path.write_text(text + f"seed = {seed}\n")
    return path
