import json
import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


def write_toy_data(root: Path, train_n=5000, eval_n=2000) -> Path:
    """Two-moons train/test plus a 4-sigma-shifted Gaussian OoD split."""
    from nads.data import SyntheticSpec, make_synthetic, save_points_csv

    root.mkdir(parents=True, exist_ok=True)
    train = make_synthetic(SyntheticSpec("two_moons", count=train_n, seed=101))
    test = make_synthetic(SyntheticSpec("two_moons", count=eval_n, seed=102))
    pts = train.x.reshape(-1, 2)
    mean, std = pts.mean(axis=0), pts.std(axis=0)
    ood = make_synthetic(
        SyntheticSpec(
            "shifted_gaussian",
            count=eval_n,
            seed=103,
            params={"shift": (mean + 4.0 * std).tolist(), "sigma": float(std.mean())},
        )
    )
    save_points_csv(root / "train.csv", train)
    save_points_csv(root / "test.csv", test)
    save_points_csv(root / "ood.csv", ood)
    manifest = root / "data.json"
    manifest.write_text(
        json.dumps(
            {
                "name": "toy-moons",
                "format": "csv",
                "splits": {"train": "train.csv", "test": "test.csv", "ood": "ood.csv"},
            }
        )
    )
    return manifest


def run_toy_pipeline(out_root: Path, data_manifest: Path, seed_env="7") -> dict:
    """search -> ensemble -> score both splits -> eval -> generate, all via
    the CLI entry point with NADS_SEED as the only seed source."""
    from nads.cli import main

    prev = os.environ.get("NADS_SEED")
    os.environ["NADS_SEED"] = seed_env
    try:
        rc = {}
        rc["search"] = main([
            "search", "--profile", "toy2d", "--data", str(data_manifest),
            "--out-dir", str(out_root / "search"),
        ])
        rc["ensemble"] = main([
            "ensemble", "--profile", "toy2d", "--phi", str(out_root / "search" / "phi.json"),
            "--data", str(data_manifest), "--members", "3",
            "--out-dir", str(out_root / "ensemble"),
        ])
        rc["score_in"] = main([
            "score", "--profile", "toy2d",
            "--ensemble", str(out_root / "ensemble" / "ensemble.json"),
            "--data", str(data_manifest), "--split", "test",
            "--out-dir", str(out_root / "score_in"),
        ])
        rc["score_out"] = main([
            "score", "--profile", "toy2d",
            "--ensemble", str(out_root / "ensemble" / "ensemble.json"),
            "--data", str(data_manifest), "--split", "ood",
            "--out-dir", str(out_root / "score_out"),
        ])
        rc["eval"] = main([
            "eval", "--profile", "toy2d",
            "--in-report", str(out_root / "score_in" / "waic_report.csv"),
            "--out-report", str(out_root / "score_out" / "waic_report.csv"),
            "--out-dir", str(out_root / "eval"),
        ])
        rc["generate"] = main([
            "generate", "--profile", "toy2d",
            "--ensemble", str(out_root / "ensemble" / "ensemble.json"),
            "--count", "8", "--temperature", "0.7",
            "--out-dir", str(out_root / "generate"),
        ])
        return rc
    finally:
        if prev is None:
            os.environ.pop("NADS_SEED", None)
        else:
            os.environ["NADS_SEED"] = prev


@pytest.fixture(scope="session")
def toy_data(tmp_path_factory) -> Path:
    return write_toy_data(tmp_path_factory.mktemp("toy_data"))


@pytest.fixture(scope="session")
def toy_pipeline(tmp_path_factory, toy_data):
    """One full CLI pipeline run under NADS_SEED=7; shared across tests."""
    out_root = tmp_path_factory.mktemp("toy_run")
    codes = run_toy_pipeline(out_root, toy_data)
    return {"root": out_root, "codes": codes, "data": toy_data}


@pytest.fixture(scope="session")
def toy_pipeline_rerun(tmp_path_factory, toy_data):
    """An independent second run with the same seed, for byte-level checks."""
    out_root = tmp_path_factory.mktemp("toy_run_again")
    codes = run_toy_pipeline(out_root, toy_data)
    return {"root": out_root, "codes": codes, "data": toy_data}
