import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparseattn import masks
from sparseattn.masks import (
    AttentionMask,
    MaskError,
    MaskSpec,
    drop_diagonal,
    generate_mask,
    load_mask,
    mask_from_json,
    mask_to_json,
    random_drop,
    render_ascii,
    render_pgm,
    save_mask,
)
from sparseattn.numerics import Rng


def spec_strategy():
    kinds = st.sampled_from(masks.KINDS)
    return st.builds(
        lambda kind, n, seed, sym, diag: MaskSpec(
            kind=kind, n=n, stride=max(2, round(np.sqrt(n))), window=2,
            seed=seed, symmetrize=sym, keep_diag=diag,
        ),
        kinds, st.integers(8, 40), st.integers(0, 999),
        st.booleans(), st.booleans(),
    )


class TestGenerate:
    def test_full_is_dense(self):
        assert generate_mask(MaskSpec("full", 16)).sparsity() == 0.0

    def test_star_reference_sparsity(self):
        m = generate_mask(MaskSpec("star", 128))
        assert abs(100 * m.sparsity() - 96.1) <= 0.3

    def test_logsparse_row_before_symmetrization(self):
        m = generate_mask(MaskSpec("logsparse", 16, symmetrize=False))
        row10 = set(np.flatnonzero(m.bits[10]).tolist())
        assert row10 == {10, 9, 8, 6, 2}  # self and i - 2^k while 2^k <= i

    def test_star_relay_row_and_column(self):
        m = generate_mask(MaskSpec("star", 16))
        assert m.bits[0].all() and m.bits[:, 0].all()

    def test_deterministic_per_spec(self):
        a = generate_mask(MaskSpec("bigbird", 32, window=1, seed=5))
        b = generate_mask(MaskSpec("bigbird", 32, window=1, seed=5))
        assert a == b

    def test_invalid_params_rejected(self):
        with pytest.raises(MaskError):
            MaskSpec("strided", 16, stride=16)
        with pytest.raises(MaskError):
            MaskSpec("nope", 8)
        with pytest.raises(MaskError):
            MaskSpec("full", 1)

    @settings(max_examples=60, deadline=None)
    @given(spec_strategy())
    def test_symmetrize_means_symmetric(self, spec):
        m = generate_mask(spec)
        if spec.symmetrize:
            assert m.is_symmetric()
        np.testing.assert_array_equal(m.bits, generate_mask(spec).bits)

    @settings(max_examples=30, deadline=None)
    @given(spec_strategy())
    def test_keep_diag_false_clears_diagonal(self, spec):
        spec = MaskSpec(**{**spec.__dict__, "keep_diag": False})
        assert np.diag(generate_mask(spec).bits).sum() == 0


class TestSparsity:
    def test_all_ones(self):
        assert AttentionMask(np.ones((16, 16), dtype=np.uint8)).sparsity() == 0.0

    def test_identity_only(self):
        assert AttentionMask(np.eye(16, dtype=np.uint8)).sparsity() == 1 - 16 / 256


class TestDropDiagonal:
    def test_full_128_delta(self):
        full = AttentionMask(np.ones((128, 128), dtype=np.uint8))
        assert drop_diagonal(full).sparsity() - full.sparsity() == 128 / 16384

    def test_star_128(self):
        m = generate_mask(MaskSpec("star", 128))
        assert abs(100 * drop_diagonal(m).sparsity() - 96.9) <= 0.3

    @settings(max_examples=30, deadline=None)
    @given(spec_strategy())
    def test_idempotent_and_exact_delta(self, spec):
        m = generate_mask(spec)
        d1 = drop_diagonal(m)
        assert drop_diagonal(d1) == d1
        active_diag = int(np.diag(m.bits).sum())
        assert m.active_count() - d1.active_count() == active_diag

    def test_delta_exact_in_floats_at_power_of_two(self):
        # n = 128: counts over 16384 divide exactly in binary floating point
        m = generate_mask(MaskSpec("longformer", 128, window=5))
        active_diag = int(np.diag(m.bits).sum())
        assert drop_diagonal(m).sparsity() - m.sparsity() == active_diag / 16384


class TestRandomDrop:
    def test_zero_is_identity(self):
        m = generate_mask(MaskSpec("star", 16))
        assert random_drop(m, 0, Rng(0)) == m

    def test_full_128_count_128(self):
        full = AttentionMask(np.ones((128, 128), dtype=np.uint8))
        out = random_drop(full, 128, Rng(3))
        assert out.sparsity() == 128 / 16384

    def test_same_seed_identical(self):
        m = generate_mask(MaskSpec("longformer", 32, window=2))
        a = random_drop(m, 10, Rng(9))
        b = random_drop(m, 10, Rng(9))
        assert a == b

    def test_rejects_overdrop(self):
        m = AttentionMask(np.eye(4, dtype=np.uint8))
        with pytest.raises(MaskError):
            random_drop(m, 5, Rng(0))


class TestRender:
    def test_ascii_identity(self):
        m = AttentionMask(np.eye(2, dtype=np.uint8))
        assert render_ascii(m) == "█·\n·█\n"

    def test_pgm_header_and_payload(self):
        m = generate_mask(MaskSpec("star", 16))
        data = render_pgm(m)
        assert data.startswith(b"P5\n16 16\n255\n")
        body = np.frombuffer(data[len(b"P5\n16 16\n255\n"):], dtype=np.uint8)
        assert body.size == 256
        grid = body.reshape(16, 16)
        assert (grid[0] == 255).all() and (grid[:, 0] == 255).all()

    def test_unknown_format(self):
        with pytest.raises(MaskError):
            masks.render_mask(generate_mask(MaskSpec("full", 4)), "svg")


class TestJsonRoundTrip:
    def test_identity_document(self):
        m = AttentionMask(np.eye(2, dtype=np.uint8))
        doc = json.loads(mask_to_json(m))
        assert doc["n"] == 2 and doc["rows"] == ["10", "01"]

    @settings(max_examples=40, deadline=None)
    @given(spec_strategy())
    def test_round_trip(self, spec):
        m = generate_mask(spec)
        assert mask_from_json(mask_to_json(m)) == m

    def test_file_round_trip(self, tmp_path):
        m = generate_mask(MaskSpec("bigbird", 24, window=1, seed=2))
        path = tmp_path / "m.json"
        save_mask(m, path, header={"note": "test"})
        assert load_mask(path) == m

    def test_bad_documents(self):
        with pytest.raises(MaskError):
            mask_from_json("not json")
        with pytest.raises(MaskError):
            mask_from_json(json.dumps({"n": 2, "rows": ["10"]}))
        with pytest.raises(MaskError):
            mask_from_json(json.dumps({"n": 2, "rows": ["10", "0"]}))
        with pytest.raises(MaskError):
            mask_from_json(json.dumps({"n": 2, "rows": ["10", "0x"]}))
        with pytest.raises(MaskError):
            mask_from_json(json.dumps({"rows": ["10", "01"]}))


class TestReferenceRatios:
    def test_all_six_at_n128(self):
        tolerances = {
            "star": 0.3, "bigbird": 1.0, "logsparse": 0.7,
            "longformer": 1.0, "fixed": 1.5, "strided": 1.5,
        }
        for name, spec in masks.baseline_specs(128).items():
            got = 100 * generate_mask(spec).sparsity()
            want = masks.REFERENCE_SPARSITY_N128[name][0]
            assert abs(got - want) <= tolerances[name], (name, got, want)
