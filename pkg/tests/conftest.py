"""Shared fixtures.

The desk-scale artifacts (dataset, pretrained encoders, aligner, trained
systems) take tens of minutes to build, so they are cached under
``<repo>/.cache/`` in a directory keyed by the run configuration and a hash
of the package sources.  Delete the directory to force a rebuild.
"""

import hashlib
from dataclasses import dataclass
from pathlib import Path

import pytest

import mmtsd
from mmtsd.config import load_run_config, with_overrides

REPO = Path(__file__).resolve().parent.parent
DESK_CONFIG = Path(__file__).resolve().parent / "desk.cfg"


def _source_key() -> str:
    h = hashlib.sha256(DESK_CONFIG.read_bytes())
    pkg = Path(mmtsd.__file__).parent
    for path in sorted(pkg.rglob("*")):
        if path.suffix in (".py", ".tsv") and "__pycache__" not in path.parts:
            h.update(str(path.relative_to(pkg)).encode())
            h.update(path.read_bytes())
    return h.hexdigest()[:12]


@dataclass
class DeskArtifacts:
    root: Path

    @property
    def run(self):
        return load_run_config(DESK_CONFIG)

    def _stamped(self, name, build):
        path = self.root / name
        if not path.exists():
            build(path)
        return path

    @property
    def data(self) -> Path:
        from mmtsd.pipeline import synth_to_dir

        return self._stamped("data", lambda p: synth_to_dir(self.run, p))

    @property
    def pretrained(self) -> Path:
        from mmtsd.pipeline import run_pretrain

        def build(p):
            stats = run_pretrain(self.run, p, self.root / "pretrain.log")
            (self.root / "pretrain_stats.txt").write_text(
                f"{stats['speaker_accuracy']}\t{stats['text_accuracy']}\n")
        return self._stamped("pretrained.ckpt", build)

    def pretrain_stats(self) -> tuple[float, float]:
        _ = self.pretrained
        spk, txt = (self.root / "pretrain_stats.txt").read_text().split()
        return float(spk), float(txt)

    @property
    def aligned(self) -> Path:
        from mmtsd.pipeline import run_align

        return self._stamped("aligned.ckpt", lambda p: run_align(self.run, self.pretrained, p,
                                                                  self.root / "align.log"))

    def trained(self, face_route: str = "aligner") -> Path:
        from mmtsd.pipeline import load_data_dir, run_train

        run = self.route_run(face_route)

        def build(p):
            _, splits = load_data_dir(self.data, ("train", "val"))
            run_train(run, splits, self.aligned, p, self.root / f"train_{face_route}.log")
        return self._stamped(f"mmtsd_{face_route}.ckpt", build)

    def route_run(self, face_route: str):
        return with_overrides(self.run, mmtsd={"face_route": face_route})


@pytest.fixture(scope="session")
def desk() -> DeskArtifacts:
    root = REPO / ".cache" / f"desk-{_source_key()}"
    root.mkdir(parents=True, exist_ok=True)
    return DeskArtifacts(root)


TINY_CONFIG = """\
[world]
seed = {seed}
duration_s = 4.0
[data]
n_pretrain_speakers = 60
n_train_speakers = 20
n_test_speakers = 10
n_train = 6
n_val = 2
n_test = 3
n_test_seen = 2
n_test_same_gender = 2
aligner_views_per_speaker = 2
[model]
d_model = 32
n_heads = 4
d_ff = 64
enc_layers = 1
dec_layers = 1
[pretrain_speaker]
epochs = 1
steps_per_epoch = 5
[pretrain_text]
epochs = 1
[aligner]
epochs = 1
[train]
epochs = 1
batch_size = 3
"""


@dataclass
class TinyRun:
    root: Path
    config: Path
    data: Path
    pretrained: Path
    aligned: Path
    trained: Path


def run_tiny_pipeline(root: Path, seed: int = 0) -> TinyRun:
    """synth -> pretrain -> align -> train through the command line, in ``root``.

    The world seed goes in the config file so every stage sees the same corpus.
    """
    from mmtsd.cli import run_command

    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CONFIG.format(seed=seed))
    r = TinyRun(root, cfg, root / "data", root / "pre.ckpt", root / "align.ckpt", root / "mm.ckpt")
    steps = [
        ["synth", "--config", str(cfg), "--out", str(r.data)],
        ["pretrain", "--config", str(cfg), "--out", str(r.pretrained)],
        ["align", "--config", str(cfg), "--pretrained", str(r.pretrained), "--out", str(r.aligned)],
        ["train", "--config", str(cfg), "--data", str(r.data), "--init", str(r.aligned),
         "--out", str(r.trained), "--log", str(root / "train.log")],
    ]
    for argv in steps:
        assert run_command(argv) == 0, argv
    return r


@pytest.fixture(scope="session")
def tiny(tmp_path_factory) -> TinyRun:
    return run_tiny_pipeline(tmp_path_factory.mktemp("tiny"))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
