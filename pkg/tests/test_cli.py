"""End-to-end command tests, run in-process through main()."""

import os

import numpy as np
import pytest

from meshdvae.cli import main
from meshdvae.meshio import load_ply
from meshdvae.synthetic import load_dataset


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "ds"
    rc = main(["gen", "--out", str(path), "--seed", "5", "--subjects", "12",
               "--subdivisions", "1"])
    assert rc == 0
    return path


@pytest.fixture(scope="module")
def dvae_run(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "dvae"
    rc = main(["train", "dvae", "--dataset", str(dataset), "--out", str(out),
               "--epochs", "2", "--alpha", "2"])
    assert rc == 0
    return out


def test_gen_writes_manifest_and_regions(dataset):
    assert (dataset / "manifest.csv").exists()
    assert (dataset / "regions.json").exists()
    assert (dataset / "effective_config.yaml").exists()
    coords, labels, conn, regions = load_dataset(dataset)
    assert coords.shape == (12, 42, 3)


def test_gen_same_seed_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        main(["gen", "--out", str(tmp_path / d), "--seed", "9",
              "--subjects", "6", "--subdivisions", "1"])
    a = (tmp_path / "a" / "mesh_00002.ply").read_bytes()
    b = (tmp_path / "b" / "mesh_00002.ply").read_bytes()
    assert a == b


def test_config_file_with_unknown_key_is_rejected(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("not_a_real_option: 1\n")
    rc = main(["gen", "--config", str(cfg), "--out", str(tmp_path / "out")])
    assert rc == 2
    assert "unknown config keys" in capsys.readouterr().err


def test_config_file_values_are_applied(tmp_path):
    cfg = tmp_path / "gen.yaml"
    cfg.write_text("subjects: 4\nsubdivisions: 1\nseed: 3\n")
    rc = main(["gen", "--config", str(cfg), "--out", str(tmp_path / "out")])
    assert rc == 0
    coords, *_ = load_dataset(tmp_path / "out")
    assert len(coords) == 4


def test_cli_flag_beats_config_file(tmp_path):
    cfg = tmp_path / "gen.yaml"
    cfg.write_text("subjects: 4\nsubdivisions: 1\n")
    rc = main(["gen", "--config", str(cfg), "--subjects", "6",
               "--out", str(tmp_path / "out")])
    assert rc == 0
    coords, *_ = load_dataset(tmp_path / "out")
    assert len(coords) == 6


def test_effective_config_is_echoed(dvae_run):
    text = (dvae_run / "effective_config.yaml").read_text()
    assert "alpha: 2.0" in text
    assert "command: train dvae" in text


def test_train_outputs(dvae_run):
    assert (dvae_run / "dvae.ckpt").exists()
    assert (dvae_run / "normalization.npz").exists()
    log = (dvae_run / "training_log.csv").read_text().splitlines()
    assert log[0] == "epoch,kl,recon,class,total,lr"
    assert len(log) == 3


def test_transform_writes_both_meshes_and_displacement(dataset, dvae_run,
                                                       tmp_path):
    rc = main(["transform", "--checkpoint", str(dvae_run / "dvae.ckpt"),
               "--hierarchy", str(dataset / "hierarchy.bin"),
               "--stats", str(dvae_run / "normalization.npz"),
               "--mesh", str(dataset / "mesh_00000.ply"),
               "--label", "0", "--out", str(tmp_path)])
    assert rc == 0
    male, _ = load_ply(tmp_path / "xhat_male.ply")
    female, _ = load_ply(tmp_path / "xhat_female.ply")
    assert male.coords.shape == (42, 3)
    assert not np.array_equal(male.coords, female.coords)
    # The displacement channel holds the per-vertex distance between the two.
    _, quality = load_ply(tmp_path / "displacement.ply")
    want = np.linalg.norm(male.coords - female.coords, axis=-1)
    np.testing.assert_allclose(quality, want, rtol=1e-12)


def test_transform_as_one_class_writes_only_that_mesh(dataset, dvae_run,
                                                      tmp_path):
    rc = main(["transform", "--checkpoint", str(dvae_run / "dvae.ckpt"),
               "--hierarchy", str(dataset / "hierarchy.bin"),
               "--mesh", str(dataset / "mesh_00000.ply"),
               "--label", "0", "--as", "female", "--out", str(tmp_path)])
    assert rc == 0
    assert (tmp_path / "xhat_female.ply").exists()
    assert (tmp_path / "displacement.ply").exists()
    assert not (tmp_path / "xhat_male.ply").exists()


def test_transform_matches_library_procedures(dataset, dvae_run, tmp_path):
    from meshdvae.evaluation import sex_preserve
    from meshdvae.hierarchy import load_hierarchy
    from meshdvae.mesh import NormalizationStats
    from meshdvae.model import DvaeModel

    rc = main(["transform", "--checkpoint", str(dvae_run / "dvae.ckpt"),
               "--hierarchy", str(dataset / "hierarchy.bin"),
               "--stats", str(dvae_run / "normalization.npz"),
               "--mesh", str(dataset / "mesh_00001.ply"),
               "--label", "1", "--out", str(tmp_path)])
    assert rc == 0
    hier = load_hierarchy(dataset / "hierarchy.bin")
    dvae = DvaeModel.load(dvae_run / "dvae.ckpt", hier)
    stats = NormalizationStats.load(dvae_run / "normalization.npz")
    mesh, _ = load_ply(dataset / "mesh_00001.ply")
    want = stats.invert(sex_preserve(dvae, stats.apply(mesh.coords), 1))
    got, _ = load_ply(tmp_path / "xhat_female.ply")
    np.testing.assert_array_equal(got.coords, want)


def test_transform_without_label_announces_the_estimate(dataset, dvae_run,
                                                        tmp_path, capsys):
    rc = main(["transform", "--checkpoint", str(dvae_run / "dvae.ckpt"),
               "--hierarchy", str(dataset / "hierarchy.bin"),
               "--mesh", str(dataset / "mesh_00002.ply"),
               "--out", str(tmp_path)])
    assert rc == 0
    assert "estimate" in capsys.readouterr().out


def test_saliency_command(dataset, tmp_path):
    run = tmp_path / "c"
    rc = main(["train", "c", "--dataset", str(dataset), "--out", str(run),
               "--epochs", "2"])
    assert rc == 0
    out = tmp_path / "sal"
    rc = main(["saliency", "--checkpoint", str(run / "c.ckpt"),
               "--dataset", str(dataset), "--out", str(out)])
    assert rc == 0
    mesh, quality = load_ply(out / "saliency.ply")
    assert quality is not None
    assert (quality >= 0).all()


def test_report_command(dataset, dvae_run, tmp_path):
    run = tmp_path / "c"
    main(["train", "c", "--dataset", str(dataset), "--out", str(run),
          "--epochs", "2"])
    out = tmp_path / "rep"
    rc = main(["report", "--dataset", str(dataset),
               "--checkpoint", str(dvae_run / "dvae.ckpt"),
               "--classifier", str(run / "c.ckpt"), "--out", str(out)])
    assert rc == 0
    text = (out / "report.txt").read_text()
    for token in ("CA", "OSRSR", "SSRSR", "RE", "consistency"):
        assert token in text
    assert (out / "swap_distance_map.ply").exists()


def test_align_command(tmp_path, capsys):
    src = tmp_path / "src"
    main(["gen", "--out", str(src), "--seed", "2", "--subjects", "5",
          "--subdivisions", "1", "--perturb"])
    out = tmp_path / "aligned"
    rc = main(["align", "--dataset", str(src), "--out", str(out),
               "--reference", "0"])
    assert rc == 0
    coords, labels, conn, regions = load_dataset(out)
    # After alignment, meshes live in one frame: centroids nearly coincide.
    centroids = coords.mean(axis=1)
    assert np.abs(centroids - centroids[0]).max() < 1.0


def test_version_mismatch_message_names_both_versions(dataset, dvae_run,
                                                      tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    raw = bytearray((dvae_run / "dvae.ckpt").read_bytes())
    raw[8] = 42
    bad.write_bytes(bytes(raw))
    rc = main(["transform", "--checkpoint", str(bad),
               "--hierarchy", str(dataset / "hierarchy.bin"),
               "--mesh", str(dataset / "mesh_00000.ply"),
               "--out", str(tmp_path)])
    assert rc == 2
    err = capsys.readouterr().err
    assert "42" in err and "1" in err


def test_env_var_sets_default_output_root(dataset, monkeypatch, tmp_path):
    # Without --out, artifacts land in a timestamped directory under the root.
    monkeypatch.setenv("DVAE_MESH_OUT", str(tmp_path / "envout"))
    rc = main(["gen", "--seed", "1", "--subjects", "4", "--subdivisions", "1"])
    assert rc == 0
    runs = list((tmp_path / "envout").glob("gen-*"))
    assert len(runs) == 1
    assert (runs[0] / "manifest.csv").exists()


def test_jobs_must_be_positive(dataset, capsys):
    rc = main(["train", "c", "--dataset", str(dataset), "--epochs", "1",
               "--jobs", "0"])
    assert rc == 2
    assert "jobs" in capsys.readouterr().err


def test_cv_command_tiny(dataset, tmp_path):
    out = tmp_path / "cv"
    rc = main(["cv", "--dataset", str(dataset), "--out", str(out),
               "--alphas", "1", "--sqrt-vs", "1", "--folds", "2",
               "--epochs", "1"])
    assert rc == 0
    text = (out / "cv_report.txt").read_text()
    assert "fold 0" in text and "fold 1" in text and "aggregate" in text
    assert "alpha=1" in text
