import numpy as np

from difftrack import load_seed_table, load_tracks, save_mask, save_volume
from difftrack import synth
from difftrack.cli import main


def write_straight_fixture(tmp_path, dims=(32, 8, 8)):
    vol = synth.make_single_lobe(dims, 8, axis=(1.0, 0.0, 0.0))
    mask = synth.full_mask(vol)
    fod = tmp_path / "fod.nii"
    msk = tmp_path / "mask.nii"
    save_volume(fod, vol)
    save_mask(msk, mask)
    return str(fod), str(msk)


def test_track_straight_field(tmp_path, capsys):
    fod, msk = write_straight_fixture(tmp_path)
    out = tmp_path / "out.tck"
    code = main(
        [
            "track",
            "--fod", fod,
            "--mask", msk,
            "--n", "20",
            "--seed-mask", msk,
            "--step", "1",
            "--cutoff", "1.0",
            "--angle", "45",
            "--minlen", "0",
            "--maxlen", "40",
            "--rng", "7",
            "--threads", "1",
            "--out", str(out),
        ]
    )
    assert code == 0
    tracks = load_tracks(out)
    assert len(tracks) > 0
    for t in tracks:
        # straight tracks along x
        assert np.abs(t[:, 1] - t[0, 1]).max() < 1e-5
        assert np.abs(t[:, 2] - t[0, 2]).max() < 1e-5
    printed = capsys.readouterr().out
    assert "exit_mask" in printed and "length_exceed" in printed


def test_track_seed_reuse_bit_identical(tmp_path):
    fod, msk = write_straight_fixture(tmp_path)
    out1 = tmp_path / "a.tck"
    seeds_csv = tmp_path / "seeds.csv"
    args = [
        "track", "--fod", fod, "--mask", msk,
        "--step", "1", "--cutoff", "1.0", "--angle", "45",
        "--minlen", "0", "--maxlen", "20",
    ]
    code = main(args + ["--n", "15", "--seed-mask", msk, "--rng", "3",
                        "--out", str(out1), "--save-seeds", str(seeds_csv)])
    assert code == 0
    out2 = tmp_path / "b.tck"
    code = main(args + ["--seeds", str(seeds_csv), "--out", str(out2)])
    assert code == 0
    assert out1.read_bytes() == out2.read_bytes()
    load_seed_table(seeds_csv)


def test_track_determinism_across_runs_and_threads(tmp_path, monkeypatch):
    fod, msk = write_straight_fixture(tmp_path)
    blobs = []
    for threads, rng in (("1", "5"), ("1", "5"), ("4", "5")):
        out = tmp_path / f"t{len(blobs)}.tck"
        code = main(
            [
                "track", "--fod", fod, "--mask", msk,
                "--n", "12", "--seed-mask", msk,
                "--step", "1", "--cutoff", "1.0", "--angle", "45",
                "--minlen", "0", "--maxlen", "25",
                "--rng", rng, "--threads", threads, "--out", str(out),
            ]
        )
        assert code == 0
        blobs.append(out.read_bytes())
    assert blobs[0] == blobs[1] == blobs[2]
    # env var overrides --threads without changing output
    monkeypatch.setenv("DIFFTRACK_THREADS", "2")
    out = tmp_path / "env.tck"
    code = main(
        [
            "track", "--fod", fod, "--mask", msk,
            "--n", "12", "--seed-mask", msk,
            "--step", "1", "--cutoff", "1.0", "--angle", "45",
            "--minlen", "0", "--maxlen", "25",
            "--rng", "5", "--threads", "1", "--out", str(out),
        ]
    )
    assert code == 0
    assert out.read_bytes() == blobs[0]


def test_track_cutoff_above_field_maximum(tmp_path, capsys):
    fod, msk = write_straight_fixture(tmp_path, dims=(12, 8, 8))
    vol = synth.make_single_lobe((12, 8, 8), 8)
    interior = synth.box_mask(vol, (1, 1, 1), (10, 6, 6))
    seed_msk = tmp_path / "seedmask.nii"
    save_mask(seed_msk, interior)
    out = tmp_path / "none.tck"
    code = main(
        [
            "track", "--fod", fod, "--mask", msk,
            "--n", "10", "--seed-mask", str(seed_msk),
            "--step", "1", "--cutoff", "99.0", "--angle", "45",
            "--minlen", "0", "--maxlen", "10",
            "--rng", "1", "--out", str(out),
        ]
    )
    assert code == 0
    assert load_tracks(out) == []
    printed = capsys.readouterr().out
    assert "seed_rejected: 10" in printed


def test_track_retry_until_n(tmp_path):
    # half the seed mask sits in a dead region, forcing retries
    vol = synth.make_single_lobe((16, 8, 8), 8, gain_axis=0, gain_range=(1.0, 0.0))
    mask = synth.full_mask(vol)
    fod = tmp_path / "fod.nii"
    msk = tmp_path / "mask.nii"
    save_volume(fod, vol)
    save_mask(msk, mask)
    out = tmp_path / "out.tck"
    code = main(
        [
            "track", "--fod", str(fod), "--mask", str(msk),
            "--n", "25", "--seed-mask", str(msk),
            "--step", "1", "--cutoff", "1.5", "--angle", "45",
            "--minlen", "0", "--maxlen", "10",
            "--rng", "2", "--retry-until-n", "--out", str(out),
        ]
    )
    assert code == 0
    assert len(load_tracks(out)) >= 25


def test_track_validation_failures(tmp_path):
    fod, msk = write_straight_fixture(tmp_path, dims=(8, 8, 8))
    out = tmp_path / "x.tck"
    assert main(["track", "--fod", fod, "--mask", msk, "--out", str(out)]) == 1
    assert main(["track", "--fod", "/nonexistent", "--mask", msk,
                 "--n", "2", "--seed-mask", msk, "--out", str(out)]) == 1
    garbage = tmp_path / "garbage.nii"
    garbage.write_bytes(b"not a volume at all")
    assert main(["track", "--fod", str(garbage), "--mask", msk,
                 "--n", "2", "--seed-mask", msk, "--out", str(out)]) == 1


def test_gradcheck_cli(tmp_path, capsys):
    vol = synth.make_bent_lobe(
        (12, 8, 8), 8, voxel_size=(2.0, 2.0, 2.0),
        bend_start=0.0, bend_width=11.0, bend_degrees=16.0,
    )
    mask = synth.full_mask(vol)
    fod = tmp_path / "fod.nii"
    msk = tmp_path / "mask.nii"
    save_volume(fod, vol)
    save_mask(msk, mask)
    out = tmp_path / "grad.csv"
    code = main(
        [
            "gradcheck", "--fod", str(fod), "--mask", str(msk),
            "--seed", "4.0,8.0,8.0", "--dir", "1,0,0",
            "--coordinate", "8,y", "--fd-step", "1e-4",
            "--max-points", "9", "--out", str(out),
        ]
    )
    assert code == 0
    text = out.read_text().splitlines()
    assert text[0] == "voxel_i,voxel_j,voxel_k,coeff,analytic,numeric,rel_err"
    assert len(text) > 10
    assert "max rel err" in capsys.readouterr().out


def test_gradcheck_seed_coordinate_zero_partials(tmp_path):
    fod, msk = write_straight_fixture(tmp_path, dims=(12, 8, 8))
    out = tmp_path / "grad.csv"
    code = main(
        [
            "gradcheck", "--fod", fod, "--mask", msk,
            "--seed", "4.0,4.0,4.0", "--dir", "1,0,0",
            "--coordinate", "0,x", "--max-points", "5", "--out", str(out),
        ]
    )
    assert code == 0
    assert len(out.read_text().splitlines()) == 1  # header only


def test_compare_identity_and_translation(tmp_path, capsys):
    rng = np.random.default_rng(5)
    tracks = [rng.standard_normal((n, 3)) * 10 for n in (4, 7, 3)]
    from difftrack import save_tracks

    a = tmp_path / "a.tck"
    save_tracks(a, tracks)
    out = tmp_path / "d.csv"
    code = main(["compare", "--a", str(a), "--b", str(a), "--out", str(out), "--no-plot"])
    assert code == 0
    rows = out.read_text().splitlines()[1:]
    assert all(float(r.split(",")[1]) == 0.0 for r in rows)

    shifted = [t + np.array([10.0, 0.0, 0.0]) for t in tracks]
    b = tmp_path / "b.tck"
    save_tracks(b, shifted)
    out2 = tmp_path / "d2.csv"
    code = main(["compare", "--a", str(a), "--b", str(b), "--out", str(out2), "--no-plot"])
    assert code == 0
    rows = out2.read_text().splitlines()[1:]
    dists = [float(r.split(",")[1]) for r in rows]
    assert all(abs(d - 10.0) < 1e-5 for d in dists)


def test_compare_count_mismatch(tmp_path):
    rng = np.random.default_rng(6)
    from difftrack import save_tracks

    a = tmp_path / "a.tck"
    b = tmp_path / "b.tck"
    save_tracks(a, [rng.standard_normal((4, 3))])
    save_tracks(b, [rng.standard_normal((4, 3)), rng.standard_normal((5, 3))])
    out = tmp_path / "d.csv"
    assert main(["compare", "--a", str(a), "--b", str(b), "--out", str(out)]) == 1
    assert (
        main(
            ["compare", "--a", str(a), "--b", str(b), "--out", str(out),
             "--crop-to-shorter", "--no-plot"]
        )
        == 0
    )


def test_compare_writes_figure(tmp_path):
    rng = np.random.default_rng(7)
    from difftrack import save_tracks

    a = tmp_path / "a.tck"
    save_tracks(a, [rng.standard_normal((5, 3)) for _ in range(4)])
    out = tmp_path / "d.csv"
    code = main(["compare", "--a", str(a), "--b", str(a), "--out", str(out)])
    assert code == 0
    fig = tmp_path / "d.png"
    assert fig.exists() and fig.stat().st_size > 1000
    custom = tmp_path / "custom.png"
    code = main(["compare", "--a", str(a), "--b", str(a), "--out", str(out), "--plot", str(custom)])
    assert code == 0
    assert custom.exists()


def test_synth_cli(tmp_path):
    out = tmp_path / "v.nii"
    msk = tmp_path / "m.nii"
    code = main(
        [
            "synth", "--kind", "single-lobe", "--dims", "6,6,6", "--lmax", "8",
            "--axis", "0,0,1", "--out", str(out), "--mask-out", str(msk),
        ]
    )
    assert code == 0
    from difftrack import load_mask, load_volume

    vol = load_volume(out)
    assert vol.dims == (6, 6, 6) and vol.lmax == 8
    mask = load_mask(msk)
    assert mask.values.all()
    assert main(["synth", "--kind", "nope", "--dims", "4,4,4", "--out", str(out)]) == 1
    assert main(["synth", "--kind", "isotropic", "--dims", "bad", "--out", str(out)]) == 1


def test_cli_never_crashes_on_malformed_args():
    assert main([]) == 1
    assert main(["track"]) == 1
    assert main(["compare", "--a", "x"]) == 1
    assert main(["unknowncmd"]) == 1


def test_track_bidirectional_cli(tmp_path):
    fod, msk = write_straight_fixture(tmp_path, dims=(40, 8, 8))
    out = tmp_path / "bi.tck"
    code = main(
        [
            "track", "--fod", fod, "--mask", msk,
            "--n", "24", "--seed-mask", msk,
            "--step", "1", "--cutoff", "1.0", "--angle", "45",
            "--minlen", "0", "--maxlen", "8",
            "--rng", "2", "--bidirectional", "--out", str(out),
        ]
    )
    assert code == 0
    tracks = load_tracks(out)
    assert tracks
    # straight tracks within the total length budget, seed interior
    for t in tracks:
        assert len(t) <= 9
        assert np.abs(t[:, 1] - t[0, 1]).max() < 1e-5
        assert np.abs(t[:, 2] - t[0, 2]).max() < 1e-5
    assert max(len(t) for t in tracks) == 9
