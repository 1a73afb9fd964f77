#!/usr/bin/env python3
"""End-to-end smoke test for the Python bindings.

Builds the extension with cargo, imports it from the build tree, and runs a
tiny adaptation problem through generation, training, prediction, and
checkpointing, asserting determinism along the way.
"""

import json
import shutil
import subprocess
import sys
import sysconfig
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def build_extension() -> Path:
    subprocess.run(
        ["cargo", "build", "-p", "ptmda-py", "--release"], cwd=REPO, check=True
    )
    suffix = ".dylib" if sys.platform == "darwin" else ".so"
    built = REPO / "target" / "release" / f"libptmda_py{suffix}"
    if not built.exists():  # some toolchains drop the lib prefix
        built = REPO / "target" / "release" / f"ptmda_py{suffix}"
    stage = Path(tempfile.mkdtemp(prefix="ptmda_py."))
    ext = sysconfig.get_config_var("EXT_SUFFIX") or ".so"
    shutil.copy2(built, stage / f"ptmda_py{ext}")
    return stage


sys.path.insert(0, str(build_extension()))
import ptmda_py  # noqa: E402


def strip_timing(report: dict) -> dict:
    return {k: v for k, v in report.items() if k != "wall_time_secs"}


def main() -> None:
    domains = ptmda_py.generate_synthetic(
        family="rotated-moons",
        angles=[0.0, 45.0, 90.0],
        n_per_domain=120,
        noise_std=0.1,
        seed=3,
    )
    *sources, target = domains
    assert [d.role for d in domains] == ["source", "source", "target"]
    assert len(target) == 120 and target.dim == 2

    cfg = ptmda_py.TrainConfig(epochs_stage1=4, epochs_stage2=4, batch_size=32, seed=5)
    assert "epochs_stage1 = 4" in cfg.text()

    model, report_json = ptmda_py.train(sources, target, cfg)
    report = json.loads(report_json)
    assert report["seed"] == 5
    assert set(report["source_names"]) == {d.name for d in sources}
    assert report["target_accuracy"] is not None
    print(f"target accuracy {report['target_accuracy']:.3f}, "
          f"pseudo rows {report['pseudo_label_count']}")

    # Same seed, same data: bit-identical reports modulo wall time.
    _, rerun_json = ptmda_py.train(sources, target, cfg)
    assert strip_timing(json.loads(rerun_json)) == strip_timing(report)

    # Predictions agree with the report's own target accuracy.
    labels, confidence = model.predict(target.x)
    assert len(labels) == len(target) and all(0 <= c <= 1 for c in confidence)
    acc = model.accuracy(target.x, target.y)
    assert abs(acc - report["target_accuracy"]) < 1e-12

    # Embeddings have one row per sample with the configured width.
    features = model.embed(target.x)
    assert len(features) == len(target)

    # Checkpoint round-trip preserves behavior exactly.
    with tempfile.TemporaryDirectory() as tmp:
        ckpt = Path(tmp) / "model.ckpt"
        model.save(ckpt)
        reloaded = ptmda_py.Model.load(ckpt)
        assert reloaded.predict(target.x) == (labels, confidence)
        assert reloaded.source_names == model.source_names

    # Config validation errors surface as ValueError.
    try:
        ptmda_py.train(sources, target, ptmda_py.TrainConfig(lr=-1.0))
    except ValueError:
        pass
    else:
        raise AssertionError("negative lr must be rejected")

    print("smoke test passed")


if __name__ == "__main__":
    main()
