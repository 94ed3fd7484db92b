import hashlib
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from retree.data import (
    DatasetManifest,
    ImagePair,
    SyntheticTreeParams,
    darker_counts,
    darker_fraction,
    filter_realistic,
    fov_mask,
    heuristic_vessel_map,
    load_image,
    load_vessel,
    make_dataset,
    paper_split,
    save_image,
    synth_fundus,
    synth_pair,
    synth_vessel_tree,
    to_model_range,
    to_unit_range,
    write_pairs,
)
from retree.errors import DataError
from retree.metrics import confusion, jaccard


# -- image I/O --------------------------------------------------------------

def test_round_trip_within_one_level(tmp_path):
    rgb = torch.rand(3, 20, 24)
    save_image(rgb, tmp_path / "rgb.png")
    back = load_image(tmp_path / "rgb.png")
    assert back.shape == (3, 20, 24)
    assert torch.max(torch.abs(back - rgb)) <= 1 / 255
    gray = torch.rand(1, 16, 16)
    save_image(gray, tmp_path / "g.png")
    assert load_image(tmp_path / "g.png").shape == (1, 16, 16)


def test_vessel_rebinarised_on_load(tmp_path):
    v = (torch.rand(1, 16, 16) > 0.7).float()
    save_image(v * 0.9 + 0.05, tmp_path / "v.png")
    back = load_vessel(tmp_path / "v.png")
    assert torch.equal(back, v)
    assert set(back.unique().tolist()) <= {0.0, 1.0}


def test_image_errors(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"not a png")
    with pytest.raises(DataError):
        load_image(tmp_path / "bad.png")
    from PIL import Image

    Image.new("I;16", (4, 4)).save(tmp_path / "deep.png")
    with pytest.raises(DataError, match="unsupported"):
        load_image(tmp_path / "deep.png")
    with pytest.raises(DataError):
        save_image(torch.rand(2, 4, 4), tmp_path / "two.png")


def test_range_conversion_lossless():
    x = torch.randint(0, 256, (3, 8, 8)).float() / 255
    assert torch.max(torch.abs(to_unit_range(to_model_range(x)) - x)) <= 1 / 255


def test_pair_rejects_mismatched_sizes():
    with pytest.raises(DataError):
        ImagePair(torch.rand(3, 8, 8), torch.zeros(1, 9, 9))


# -- synthesizer ------------------------------------------------------------

def test_vessel_tree_deterministic_and_binary():
    p = SyntheticTreeParams(seed=11)
    a, b = synth_vessel_tree(p), synth_vessel_tree(p)
    assert torch.equal(a, b)
    assert a.shape == (1, 32, 32)
    assert set(a.unique().tolist()) <= {0.0, 1.0}
    assert not torch.equal(a, synth_vessel_tree(replace(p, seed=12)))


def test_vessel_fraction_calibration_and_fov():
    fov = torch.from_numpy(fov_mask(32, 0.47))
    fractions = []
    for seed in range(100):
        v = synth_vessel_tree(SyntheticTreeParams(seed=seed))[0]
        assert not torch.any(v.bool() & ~fov)
        fractions.append(float(v.mean()))
    assert 0.02 <= min(fractions) and max(fractions) <= 0.25


def test_larger_resolution_supported():
    v = synth_vessel_tree(SyntheticTreeParams(size=64, seed=1))
    assert v.shape == (1, 64, 64) and 0.02 <= float(v.mean()) <= 0.25


def test_params_validation():
    with pytest.raises(ValueError):
        SyntheticTreeParams(trunks=0)
    with pytest.raises(ValueError):
        SyntheticTreeParams(size=16)
    with pytest.raises(ValueError):
        SyntheticTreeParams(branch_prob=1.5)


def test_fundus_deterministic_and_range():
    v = synth_vessel_tree(SyntheticTreeParams(seed=3))
    a, b = synth_fundus(v, 3), synth_fundus(v, 3)
    assert torch.equal(a, b)
    assert a.shape == (3, 32, 32)
    assert 0 <= float(a.min()) and float(a.max()) <= 1
    assert not torch.equal(a, synth_fundus(v, 4))


def test_vessels_darker_than_local_background():
    for seed in range(20):
        pair = synth_pair(SyntheticTreeParams(seed=seed))
        darker, total = darker_counts(pair.fundus, pair.vessel)
        assert total > 0 and darker == total
        assert darker_fraction(pair.fundus, pair.vessel) == 1.0


def test_darker_fraction_detects_bright_vessels():
    pair = synth_pair(SyntheticTreeParams(seed=1))
    flat = torch.full_like(pair.fundus, 0.4)
    bright = torch.where(pair.vessel.bool(), torch.ones_like(flat), flat)
    assert darker_fraction(bright, pair.vessel) == 0.0
    assert darker_fraction(pair.fundus, torch.zeros_like(pair.vessel)) == 0.0


def test_heuristic_recovers_vessels():
    scores = []
    for seed in range(20):
        pair = synth_pair(SyntheticTreeParams(seed=seed))
        pred = torch.from_numpy(heuristic_vessel_map(pair.fundus).astype(np.float32))
        scores.append(jaccard(confusion(pred, pair.vessel[0])))
    assert np.mean(scores) >= 0.5


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), trunks=st.integers(1, 6), branch=st.floats(0, 0.2))
def test_synth_invariants_property(seed, trunks, branch):
    p = SyntheticTreeParams(seed=seed, trunks=trunks, branch_prob=branch)
    pair = synth_pair(p)
    assert torch.equal(pair.vessel, synth_vessel_tree(p))
    assert not torch.any(pair.vessel[0].bool() & ~torch.from_numpy(fov_mask(32, p.fov_radius)))
    assert float(pair.fundus.min()) >= 0 and float(pair.fundus.max()) <= 1


# -- dataset layout ---------------------------------------------------------

def _hashes(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_paper_split_ratios():
    assert paper_split(300) == (288, 2, 10)
    assert paper_split(30000) == (28800, 200, 1000)


def test_make_dataset_reproducible_and_disjoint(tmp_path):
    params = SyntheticTreeParams(seed=5)
    m = make_dataset(12, (8, 1, 3), params, tmp_path / "a")
    make_dataset(12, (8, 1, 3), params, tmp_path / "b")
    assert _hashes(tmp_path / "a") == _hashes(tmp_path / "b")
    splits = m.splits
    assert [len(splits[s]) for s in ("train", "val", "test")] == [8, 1, 3]
    assert not set(splits["train"]) & set(splits["test"])
    assert len(set(m.ids())) == 12
    text = (tmp_path / "a" / "manifest.txt").read_text().splitlines()
    assert text[0] == "# resolution 32"
    assert text[1].split() == ["00000", "train", "fundus/00000.png", "vessel/00000.png"]


def test_manifest_round_trip(tmp_path):
    m = make_dataset(6, (4, 0, 2), SyntheticTreeParams(seed=1), tmp_path)
    back = DatasetManifest.read(tmp_path)
    assert back.entries == m.entries and back.resolution == 32
    pair = back.load_pair("00002")
    expected = synth_pair(replace(SyntheticTreeParams(seed=1),
                                  seed=int(np.random.SeedSequence([1, 2]).generate_state(1)[0])))
    assert torch.equal(pair.vessel, expected.vessel)
    assert torch.max(torch.abs(pair.fundus - expected.fundus)) <= 1 / 255
    assert len(back.load_split("test")) == 2


def test_dataset_errors(tmp_path):
    make_dataset(3, (3, 0, 0), SyntheticTreeParams(), tmp_path)
    with pytest.raises(DataError, match="not empty"):
        make_dataset(3, (3, 0, 0), SyntheticTreeParams(), tmp_path)
    make_dataset(3, (3, 0, 0), SyntheticTreeParams(), tmp_path, force=True)
    with pytest.raises(DataError):
        make_dataset(3, (1, 1, 0), SyntheticTreeParams(), tmp_path / "x")
    (tmp_path / "vessel" / "00001.png").unlink()
    with pytest.raises(DataError, match="missing"):
        DatasetManifest.read(tmp_path)
    with pytest.raises(DataError, match="no manifest"):
        DatasetManifest.read(tmp_path / "nowhere")
    (tmp_path / "manifest.txt").write_text("a b c\n")
    with pytest.raises(DataError, match="expected"):
        DatasetManifest.read(tmp_path)


def test_write_pairs_layout(tmp_path):
    pairs = [synth_pair(SyntheticTreeParams(seed=i), f"g{i}") for i in range(3)]
    m = write_pairs(pairs, tmp_path)
    back = DatasetManifest.read(tmp_path)
    assert back.ids("train") == ["g0", "g1", "g2"] and back.resolution == 32
    assert m.entries == back.entries


# -- realism filtering ------------------------------------------------------

class ConstantD(torch.nn.Module):
    def __init__(self, value):
        super().__init__()
        self.value = value

    def forward(self, x):
        return torch.full((x.shape[0],), self.value)


def _pairs(n):
    return [synth_pair(SyntheticTreeParams(seed=i), str(i)) for i in range(n)]


def test_filter_constant_discriminators():
    pairs = _pairs(5)
    kept, report = filter_realistic(ConstantD(1.0), pairs)
    assert len(kept) == 5 and report["dropped"] == 0
    kept, report = filter_realistic(ConstantD(0.0), pairs)
    assert kept == [] and report["dropped"] == 5
    assert sum(report["histogram"]["counts"]) == 5
    # scores equal to the threshold are dropped
    kept, _ = filter_realistic(ConstantD(0.75), pairs, threshold=0.75)
    assert kept == []
