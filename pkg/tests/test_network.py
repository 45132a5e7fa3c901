import numpy as np
import pytest

from dynopool.complexity import GmacsLedger
from dynopool.network import (
    GAP,
    RELU,
    LayerError,
    LayerSpec,
    NetworkSpec,
    builtin,
    conv,
    dynopool,
    format_spec,
    forward,
    init_params,
    initial_scales,
    linear,
    maxpool,
    parse_spec,
    propagate,
    replace_resizers,
)
from dynopool.pool import ScaleParam
from dynopool.tensor import Tensor


def _spec(*layers, size=(16, 16), chans=1, classes=4):
    return NetworkSpec(tuple(layers), chans, size, classes)


def _kinds(layers):
    return [(l.kind, l.stride) if l.kind == "conv" else (l.kind, l.init_ratio) if l.kind == "dynopool" else l.kind
            for l in layers]


@pytest.fixture
def tiny3():
    return builtin("tiny3", 1, 4, (16, 16))


class TestReplacement:
    def test_pool_becomes_half_ratio(self):
        out = replace_resizers(_spec(conv(1, 4), maxpool(2), GAP, linear(4, 4)))
        assert _kinds(out.layers) == [("conv", 1), ("dynopool", (0.5, 0.5)), "global_avg_pool", "linear"]

    def test_strided_conv_keeps_relu_before_resizer(self):
        out = replace_resizers(_spec(conv(1, 4, stride=2), RELU, GAP, linear(4, 4)))
        assert _kinds(out.layers) == [("conv", 1), "relu", ("dynopool", (0.5, 0.5)), "global_avg_pool", "linear"]

    def test_adjacent_resizers_fuse(self):
        out = replace_resizers(_spec(conv(1, 4, stride=2), maxpool(2), GAP, linear(4, 4)))
        assert _kinds(out.layers) == [("conv", 1), ("dynopool", (0.25, 0.25)), "global_avg_pool", "linear"]

    def test_gap_untouched(self):
        out = replace_resizers(_spec(conv(1, 4), GAP, linear(4, 4)))
        assert [l.kind for l in out.layers] == ["conv", "global_avg_pool", "linear"]

    def test_idempotent(self, tiny3):
        assert replace_resizers(tiny3) == tiny3

    def test_fresh_ids_skip_existing(self):
        out = replace_resizers(_spec(conv(1, 4), dynopool("p0"), conv(4, 4), maxpool(2), GAP, linear(4, 4)))
        assert list(out.resizers()) == ["p0", "p1"]

    def test_two_parameters_per_resizer(self):
        pooled = _spec(conv(1, 8), RELU, maxpool(2), conv(8, 8, stride=2), RELU, GAP, linear(8, 4))
        replaced = replace_resizers(pooled)
        rng = np.random.default_rng(0)
        before = init_params(pooled, rng).count()
        after = init_params(replaced, np.random.default_rng(0)).count()
        assert after - before == 2 * len(replaced.resizers()) == 4

    def test_branch_arms_share_scales(self):
        arm = (conv(4, 4), maxpool(2))
        branch = LayerSpec("branch", branches=(arm, arm))
        out = replace_resizers(_spec(conv(1, 4), branch, GAP, linear(4, 4)))
        groups = out.groups()
        assert len(groups) == 1
        (rid, paths), = groups.items()
        assert paths == ["1.0.1", "1.1.1"]
        assert len(init_params(out, np.random.default_rng(0)).scales) == 1


class TestPropagation:
    def test_default_shapes(self, tiny3):
        shapes = propagate(tiny3, initial_scales(tiny3)).shapes
        assert [(s.h, s.w) for s in shapes] == [(16, 16), (8, 8), (4, 4)]

    def test_change_reaches_downstream_layers(self, tiny3):
        scales = initial_scales(tiny3)
        scales["p0"] = ScaleParam.from_ratio(0.5, 1.0)
        shapes = propagate(tiny3, scales).shapes
        assert [(s.h, s.w) for s in shapes] == [(16, 16), (8, 16), (4, 8)]

    def test_ledger_areas_match_shapes(self, tiny3):
        scales = initial_scales(tiny3)
        scales["p1"] = ScaleParam.from_ratio(0.3, 0.7)
        result = propagate(tiny3, scales)
        convs = {s.layer_id: s.h * s.w for s in result.shapes}
        for entry in result.ledger:
            if entry.layer_id in convs:
                assert entry.area == convs[entry.layer_id]
                assert entry.h * entry.w == entry.area

    def test_forward_logits_and_ledger(self, tiny3):
        params = init_params(tiny3, np.random.default_rng(0))
        x = Tensor(np.random.default_rng(1).uniform(size=(3, 1, 16, 16)))
        result = forward(tiny3, x, params)
        assert result.logits.shape == (3, 4)
        assert isinstance(result.ledger, GmacsLedger)

    def test_forward_rejects_wrong_input(self, tiny3):
        params = init_params(tiny3, np.random.default_rng(0))
        with pytest.raises(ValueError, match="does not match"):
            forward(tiny3, Tensor(np.zeros((1, 1, 8, 8))), params)

    def test_error_names_layer(self):
        spec = _spec(conv(1, 4), RELU, conv(3, 4), GAP, linear(4, 4))
        with pytest.raises(LayerError) as info:
            propagate(spec, {})
        assert info.value.layer_id == "2"
        assert "layer 2" in str(info.value)

    def test_unreplaced_pool_rejected(self):
        with pytest.raises(LayerError, match="replace_resizers"):
            propagate(_spec(conv(1, 4), maxpool(2), GAP, linear(4, 4)), {})

    def test_unknown_builtin(self):
        with pytest.raises(ValueError, match="tiny3"):
            builtin("resnet", 1, 4, (16, 16))


class TestTextForm:
    def test_round_trip_builtin(self, tiny3):
        assert parse_spec(format_spec(tiny3)) == tiny3

    def test_round_trip_branch_and_stride(self):
        text = "\n".join([
            "input 3 12 10", "classes 5", "conv 3 6 3 stride=2", "relu",
            "branch", "conv 6 6 3", "dynopool p0 0.5 0.75", "or", "conv 6 6 1", "dynopool p0 0.5 0.75", "end",
            "flatten", "linear 6 5",
        ])
        spec = parse_spec(text)
        assert spec.input_size == (12, 10)
        assert parse_spec(format_spec(spec)) == spec

    def test_comments_and_defaults(self):
        spec = parse_spec("input 1 8 8  # header\nclasses 2\nconv 1 2 3\ndynopool q\ngap\nlinear 2 2\n")
        assert spec.resizers() == {"q": (0.5, 0.5)}

    @pytest.mark.parametrize("text, match", [
        ("classes 2\nconv 1 2 3\n", "input"),
        ("input 1 8 8\nclasses 2\nbogus 1\n", "line 3"),
        ("input 1 8 8\nclasses 2\nbranch\nrelu\n", "unterminated"),
        ("input 1 8 8\nclasses 2\nconv 1 2 4\n", "odd"),
    ])
    def test_bad_text(self, text, match):
        with pytest.raises(ValueError, match=match):
            parse_spec(text)
