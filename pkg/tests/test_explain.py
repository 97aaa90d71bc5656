import numpy as np
import pytest

from malfuse.errors import DimensionMismatch, EmptyInput, InvalidClass, UntrainedModel
from malfuse.explain import (
    Cam,
    channel_weights,
    colorize,
    cumulative_cam,
    export_features,
    grad_cam,
    superimpose,
    write_feature_csv,
)
from malfuse.imaging import Modality, ModalImage
from malfuse.model import BranchConfig, ModelConfig, Sample, build_model
from malfuse.nnet import FuseOp, FusionSpec

from reference import naive_conv3x3


def probe_model(seed, side=12, filters=3, classes=9, target=4):
    """Single-branch model whose head reads only conv channel 0, positively:
    layers are [conv, relu, pool, flatten, dense->1, relu], head dense(1->K).
    The class logit is then a positive weighting of pooled channel-0 cells,
    so the cam must peak where channel 0's activation peaks."""
    cfg = ModelConfig(
        branches=(BranchConfig(Modality.GS, conv_blocks=((filters, 1),), feature_dim=1),),
        fusion=None,
        input_side=side,
        classes=classes,
    )
    model = build_model(cfg, seed)
    conv = model.branches[Modality.GS].layers[0]
    conv.bias.data[:] = 0.1  # keep some activations positive
    pooled = side // 2
    feature = model.branches[Modality.GS].layers[4]
    feature.weights.data[:] = 0.0
    feature.weights.data[0, : pooled * pooled] = 0.7  # channel 0 block of the flatten
    feature.bias.data[:] = 0.0
    model.head.weights.data[:] = 0.0
    model.head.weights.data[target - 1, 0] = 1.0
    model.head.bias.data[:] = 0.0
    model.trained = True
    return model, conv, target


class TestGradCam:
    def test_untrained_model_rejected(self):
        cfg = ModelConfig(
            branches=(BranchConfig(Modality.GS, conv_blocks=((2, 1),), feature_dim=4),),
            fusion=None,
            input_side=8,
        )
        model = build_model(cfg, 0)
        with pytest.raises(UntrainedModel):
            grad_cam(model, {Modality.GS: np.zeros((8, 8))}, 1, Modality.GS)

    def test_invalid_class(self):
        model, _, _ = probe_model(0)
        with pytest.raises(InvalidClass):
            grad_cam(model, {Modality.GS: np.zeros((12, 12))}, 10, Modality.GS)

    def test_zero_weight_branch_gives_zero_cam(self):
        model, _, target = probe_model(1)
        model.head.weights.data[:] = 0.0
        x = {Modality.GS: np.random.default_rng(0).uniform(0, 1, (12, 12))}
        cam = grad_cam(model, x, target, Modality.GS)
        assert cam.values.max() == 0.0

    def test_values_in_unit_range_max_zero_or_one(self):
        rng = np.random.default_rng(1)
        model, _, target = probe_model(2)
        for _ in range(10):
            x = {Modality.GS: rng.uniform(0, 1, (12, 12))}
            cam = grad_cam(model, x, target, Modality.GS)
            assert cam.values.min() >= 0.0 and cam.values.max() <= 1.0
            assert cam.values.max() in (0.0, 1.0)

    def test_probe_hotspot_matches_channel0_activation(self):
        rng = np.random.default_rng(2)
        model, conv, target = probe_model(3)
        hits = 0
        for _ in range(20):
            x = rng.uniform(0, 1, (12, 12))
            activation = naive_conv3x3(
                x[None], conv.weights.data, conv.bias.data
            )
            expected = np.unravel_index(np.argmax(activation[0]), activation[0].shape)
            cam = grad_cam(model, {Modality.GS: x}, target, Modality.GS)
            got = np.unravel_index(np.argmax(cam.values), cam.values.shape)
            hits += got == expected
        assert hits == 20

    def test_alpha_matches_finite_difference_channel_sensitivity(self):
        rng = np.random.default_rng(3)
        model, _, target = probe_model(4)
        x = {Modality.GS: rng.uniform(0, 1, (12, 12))}
        alphas = channel_weights(model, x, target, Modality.GS)
        model.forward(x)
        activation = model.branch_conv_activation(Modality.GS).copy()
        cells = activation.shape[1] * activation.shape[2]
        eps = 1e-5
        for k in range(activation.shape[0]):
            bump = np.zeros_like(activation)
            bump[k] = eps
            up = model.logits_from_branch_activation(Modality.GS, activation + bump)[target - 1]
            down = model.logits_from_branch_activation(Modality.GS, activation - bump)[target - 1]
            numeric = (up - down) / (2 * eps * cells)
            denom = max(1e-8, abs(alphas[k]) + abs(numeric))
            assert abs(alphas[k] - numeric) / denom < 1e-5

    def test_argmax_invariant_to_positive_logit_rescale(self):
        rng = np.random.default_rng(4)
        model, _, target = probe_model(5)
        x = {Modality.GS: rng.uniform(0, 1, (12, 12))}
        before = grad_cam(model, x, target, Modality.GS)
        model.head.weights.data *= 7.5
        after = grad_cam(model, x, target, Modality.GS)
        assert np.argmax(before.values) == np.argmax(after.values)

    def test_upscaled_shape(self):
        rng = np.random.default_rng(5)
        model, _, target = probe_model(6)
        cam = grad_cam(model, {Modality.GS: rng.uniform(0, 1, (12, 12))}, target,
                       Modality.GS, upscale_to=48)
        assert cam.upscaled.shape == (48, 48)
        assert cam.upscaled.min() >= 0.0 and cam.upscaled.max() <= 1.0


class TestCumulativeCam:
    def _cam(self, values, target=1, branch=Modality.GS):
        return Cam(values=np.asarray(values, dtype=np.float64), target_class=target, branch=branch)

    def test_single_cam_renormalized(self):
        cam = self._cam([[0.2, 0.4], [0.0, 0.1]])
        out = cumulative_cam([cam], 2)
        assert np.allclose(out.values, np.array([[0.5, 1.0], [0.0, 0.25]]))

    def test_duplicate_cams_cancel_scaling(self):
        cam = self._cam([[0.2, 0.4], [0.0, 0.1]])
        once = cumulative_cam([cam], 2)
        twice = cumulative_cam([cam, self._cam([[0.2, 0.4], [0.0, 0.1]])], 2)
        assert np.array_equal(once.values, twice.values)

    def test_disjoint_equal_hotspots_both_saturate(self):
        a = np.zeros((4, 4))
        a[0, 0] = 1.0
        b = np.zeros((4, 4))
        b[3, 3] = 1.0
        out = cumulative_cam([self._cam(a), self._cam(b)], 4)
        assert out.values[0, 0] == 1.0 and out.values[3, 3] == 1.0

    def test_order_invariant_bit_exact(self):
        rng = np.random.default_rng(6)
        cams = [self._cam(rng.uniform(0, 1, (5, 5))) for _ in range(6)]
        forward = cumulative_cam(cams, 10)
        backward = cumulative_cam(list(reversed(cams)), 10)
        shuffled = cumulative_cam([cams[i] for i in (3, 0, 5, 1, 4, 2)], 10)
        assert np.array_equal(forward.values, backward.values)
        assert np.array_equal(forward.values, shuffled.values)

    def test_empty_input(self):
        with pytest.raises(EmptyInput):
            cumulative_cam([], 4)

    def test_all_zero_accumulator_stays_zero(self):
        out = cumulative_cam([self._cam(np.zeros((3, 3)))], 3)
        assert out.values.max() == 0.0


class TestColorize:
    def test_anchor_endpoints(self):
        rgb = colorize(np.array([[0.0, 1.0]]))
        assert rgb[0, 0].tolist() == [0, 0, 255]  # blue
        assert rgb[0, 1].tolist() == [255, 0, 0]  # red

    def test_interior_anchors_exact(self):
        rgb = colorize(np.array([[0.25, 0.5, 0.75]]))
        assert rgb[0, 0].tolist() == [0, 255, 255]  # cyan
        assert rgb[0, 1].tolist() == [0, 255, 0]  # green
        assert rgb[0, 2].tolist() == [255, 255, 0]  # yellow

    def test_monotone_per_channel_between_anchors(self):
        values = np.linspace(0.5, 0.75, 40)[None, :]
        rgb = colorize(values).astype(np.int64)
        red = rgb[0, :, 0]
        green = rgb[0, :, 1]
        assert np.all(np.diff(red) >= 0)
        assert np.all(green == 255)

    def test_accepts_cam_objects(self):
        cam = Cam(values=np.zeros((2, 2)), target_class=1, branch=Modality.GS)
        assert colorize(cam).shape == (2, 2, 3)


class TestSuperimpose:
    def _base(self, side=2, value=100):
        return ModalImage(Modality.GS, side, np.full((side, side), value, dtype=np.uint8))

    def test_alpha_zero_returns_replicated_base(self):
        colored = np.zeros((2, 2, 3), dtype=np.uint8)
        out = superimpose(self._base(), colored, 0.0)
        assert np.array_equal(out, np.full((2, 2, 3), 100, dtype=np.uint8))

    def test_alpha_one_returns_heatmap(self):
        colored = np.full((2, 2, 3), 37, dtype=np.uint8)
        out = superimpose(self._base(), colored, 1.0)
        assert np.array_equal(out, colored)

    def test_midpoint_bytes(self):
        colored = np.full((2, 2, 3), 200, dtype=np.uint8)
        out = superimpose(self._base(value=100), colored, 0.5)
        assert np.array_equal(out, np.full((2, 2, 3), 150, dtype=np.uint8))

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            superimpose(self._base(), np.zeros((3, 3, 3), dtype=np.uint8), 0.5)


class TestExportFeatures:
    def _samples(self, rng, side=8, modalities=(Modality.GS,)):
        return [
            Sample(
                f"s{i}",
                (i % 2) + 1,
                {m: rng.integers(0, 256, (side, side)).astype(np.uint8) for m in modalities},
            )
            for i in range(4)
        ]

    def test_tri_concat_dimensions(self, tmp_path):
        rng = np.random.default_rng(7)
        cfg = ModelConfig(
            branches=tuple(
                BranchConfig(m, conv_blocks=((2, 1),), feature_dim=64)
                for m in (Modality.GS, Modality.EG, Modality.SH)
            ),
            fusion=FusionSpec(FuseOp.CONCAT, 3),
            input_side=8,
        )
        model = build_model(cfg, 0)
        model.trained = True
        samples = self._samples(rng, modalities=(Modality.GS, Modality.EG, Modality.SH))
        rows = export_features(model, samples)
        assert all(vec.size == 192 for _, _, vec in rows)
        out = tmp_path / "features.csv"
        write_feature_csv(out, rows)
        header = out.read_text().splitlines()[0]
        assert header.startswith("id,family,f0,") and header.endswith("f191")

    def test_single_branch_dimension_and_determinism(self):
        rng = np.random.default_rng(8)
        cfg = ModelConfig(
            branches=(BranchConfig(Modality.GS, conv_blocks=((2, 1),), feature_dim=16),),
            fusion=None,
            input_side=8,
        )
        model = build_model(cfg, 0)
        model.trained = True
        samples = self._samples(rng)
        first = export_features(model, samples)
        second = export_features(model, samples)
        assert all(v.size == 16 for _, _, v in first)
        for (_, _, a), (_, _, b) in zip(first, second):
            assert np.array_equal(a, b)

    def test_untrained_rejected(self):
        cfg = ModelConfig(
            branches=(BranchConfig(Modality.GS, conv_blocks=((2, 1),), feature_dim=4),),
            fusion=None,
            input_side=8,
        )
        with pytest.raises(UntrainedModel):
            export_features(build_model(cfg, 0), [])
