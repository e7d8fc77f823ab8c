"""Trained runs shared by the acceptance tests, plus the PASS/FAIL log.

Runs go through the command line entry point.  Set ``CAPLAB_ACCEPTANCE_CACHE``
to a directory to keep finished runs between sessions; a run is reused only
when its config text is unchanged.
"""
import csv
import hashlib
import os
import shutil
from pathlib import Path

from caplab import cli
from caplab.config import parse_config
from caplab.model import load_checkpoint

RESULTS = {}  # criterion number -> (passed, detail)

BASE = """\
[run]
seed = 0

[data]
num_utterances = 1200
"""

SWEEP = BASE + """
[sweep]
capacity = 0.5,2.0,8.0
latent_dim = 1,2,8,32
"""

UNCONSTRAINED = BASE + """
[model]
latent_dim = 8

[target]
capacity = 1000000.0
"""

UNCONDITIONED = BASE + """
[model]
latent_dim = 8
condition_on_text = false
condition_on_speaker = false

[target]
capacity = 8.0
"""

# C_H grid at C_L = 2 and C_L grid at C_H = 2, sharing the (2, 2) model
HIER_GRID_H = (0.5, 2.0, 6.0)
HIER_GRID_L = (0.5, 2.0, 6.0)
HIER_PAIRS = sorted({(h, 2.0) for h in HIER_GRID_H} | {(2.0, lo) for lo in HIER_GRID_L})

HIER_TRANSFER = BASE + """
[model]
hierarchical = true

[sweep]
latent_dim = 2
capacity_pairs = {}
""".format(",".join(f"{h!r}:{lo!r}" for h, lo in HIER_PAIRS))

HIER_BOUNDS = """\
[run]
seed = 0

[data]
num_utterances = 1200

[model]
hierarchical = true

[train]
steps = 4000

[sweep]
latent_dim = 1
capacity_pairs = 0.5:1.0,1.0:1.0,1.0:2.0
"""


def record(number, passed, detail):
    RESULTS[number] = (bool(passed), detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")


class RunStore:
    def __init__(self, root):
        self.root = Path(root)

    def _dir(self, name, text):
        key = hashlib.sha1(text.encode()).hexdigest()[:12]
        return self.root / f"{name}-{key}"

    def run(self, name, text, command):
        """Run ``caplab <command>`` on ``text`` once; returns the output directory."""
        out = self._dir(name, text)
        if (out / "done").exists():
            return out
        if out.exists():
            shutil.rmtree(out)
        out.mkdir(parents=True)
        cfg_path = out / "input.ini"
        cfg_path.write_text(text)
        code = cli.main([command, "--config", str(cfg_path), "--out", str(out)])
        if code != 0:
            raise RuntimeError(f"caplab {command} for {name} exited {code}")
        (out / "done").write_text("")
        return out


def summary_rows(directory):
    with open(Path(directory) / "summary.csv", newline="") as fh:
        return {row["cell"]: row for row in csv.DictReader(fh)}


def cell_model(directory, cell):
    return load_checkpoint(Path(directory) / cell / "model.capckpt")


def held_out(text):
    spec, _, held = parse_config(text).data.load()
    return spec, held


def store_root(tmp_path_factory):
    cache = os.environ.get("CAPLAB_ACCEPTANCE_CACHE")
    if cache:
        Path(cache).mkdir(parents=True, exist_ok=True)
        return Path(cache)
    return tmp_path_factory.mktemp("acceptance")
