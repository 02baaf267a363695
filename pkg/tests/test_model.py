import itertools

import numpy as np
import pytest

from defer.errors import CycleDetected, MissingWeight, ModelInvalid, ShapeMismatch
from defer.model import (
    LayerSpec,
    ModelGraph,
    as_tensor,
    forward,
    graph_from_text,
    graph_to_text,
    infer_shapes,
    load_model,
    run_model,
    save_model,
    topo_order,
)
from defer.synth import make_chain, make_resnet, random_input, random_model


def identity_graph(shape=(1, 4)):
    return ModelGraph(
        (LayerSpec("input", "Input", {"shape": shape}),), {}, "input", "input"
    )


def relu_graph():
    layers = (
        LayerSpec("input", "Input", {"shape": (1, 2)}),
        LayerSpec("r", "ReLU", {}, (), ("input",)),
    )
    return ModelGraph(layers, {}, "input", "r")


def diamond_graph():
    layers = (
        LayerSpec("a", "Input", {"shape": (1, 3)}),
        LayerSpec("b", "ReLU", {}, (), ("a",)),
        LayerSpec("c", "ReLU", {}, (), ("a",)),
        LayerSpec("d", "Add", {}, (), ("b", "c")),
    )
    return ModelGraph(layers, {}, "a", "d")


def all_topo_orders(graph):
    """Brute-force enumeration of every valid topological order."""
    ids = [l.id for l in graph.layers]
    deps = {l.id: set(l.inputs) for l in graph.layers}
    valid = []
    for perm in itertools.permutations(ids):
        seen = set()
        ok = True
        for lid in perm:
            if not deps[lid] <= seen:
                ok = False
                break
            seen.add(lid)
        if ok:
            valid.append(list(perm))
    return valid


class TestTopoOrder:
    def test_singleton(self):
        assert topo_order(identity_graph()) == ["input"]

    def test_chain_unique_order(self):
        g = relu_graph()
        assert topo_order(g) == ["input", "r"]

    def test_diamond_tie_break(self):
        g = diamond_graph()
        order = topo_order(g)
        assert order in all_topo_orders(g)
        # lexicographic tie-break puts b before c
        assert order == ["a", "b", "c", "d"]

    def test_cycle_detected(self):
        layers = (
            LayerSpec("input", "Input", {"shape": (1, 2)}),
            LayerSpec("x", "ReLU", {}, (), ("y",)),
            LayerSpec("y", "ReLU", {}, (), ("x",)),
        )
        with pytest.raises((CycleDetected, ModelInvalid)):
            ModelGraph(layers, {}, "input", "y")


def conv2d_same_oracle(x, kernel, bias, stride):
    """Index-set enumeration convolution, independent of the main path."""
    n, h, w, cin = x.shape
    kh, kw, _, cout = kernel.shape
    oh, ow = -(-h // stride), -(-w // stride)
    pad_h = max((oh - 1) * stride + kh - h, 0)
    pad_w = max((ow - 1) * stride + kw - w, 0)
    top, left = pad_h // 2, pad_w // 2
    out = np.zeros((n, oh, ow, cout), dtype=np.float64)
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                for o in range(cout):
                    acc = 0.0
                    for di in range(kh):
                        for dj in range(kw):
                            si = i * stride + di - top
                            sj = j * stride + dj - left
                            if 0 <= si < h and 0 <= sj < w:
                                for c in range(cin):
                                    acc += float(x[b, si, sj, c]) * float(kernel[di, dj, c, o])
                    out[b, i, j, o] = acc + float(bias[o])
    return out


class TestInferShapes:
    def test_relu_preserves(self):
        g = relu_graph()
        assert infer_shapes(g, (1, 8))["r"] == (1, 8)

    def test_dense_units(self):
        layers = (
            LayerSpec("input", "Input", {"shape": (1, 8)}),
            LayerSpec("d", "Dense", {"units": 4},
                      ("d.kernel", "d.bias"), ("input",)),
        )
        w = {"d.kernel": as_tensor(np.zeros((8, 4))), "d.bias": as_tensor(np.zeros(4))}
        g = ModelGraph(layers, w, "input", "d")
        assert infer_shapes(g, (1, 8))["d"] == (1, 4)

    def test_conv_same_stride2(self):
        # oracle: enumerate output index set explicitly
        x = np.zeros((1, 8, 8, 3), dtype=np.float32)
        k = np.zeros((3, 3, 3, 16), dtype=np.float32)
        got = conv2d_same_oracle(x, k, np.zeros(16), stride=2)
        assert got.shape == (1, 4, 4, 16)

        layers = (
            LayerSpec("input", "Input", {"shape": (1, 8, 8, 3)}),
            LayerSpec("c", "Conv2D", {"kernel": 3, "stride": 2, "filters": 16},
                      ("c.kernel", "c.bias"), ("input",)),
        )
        w = {"c.kernel": as_tensor(k), "c.bias": as_tensor(np.zeros(16))}
        g = ModelGraph(layers, w, "input", "c")
        assert infer_shapes(g, (1, 8, 8, 3))["c"] == (1, 4, 4, 16)

    def test_mismatch_names_layer(self):
        layers = (
            LayerSpec("input", "Input", {"shape": (1, 2, 2, 1)}),
            LayerSpec("bad", "Dense", {"units": 3}, ("k", "b"), ("input",)),
        )
        with pytest.raises(ShapeMismatch) as ei:
            ModelGraph(layers, {"k": as_tensor(np.zeros((4, 3))),
                                "b": as_tensor(np.zeros(3))}, "input", "bad")
        assert "bad" in str(ei.value)


class TestForward:
    def test_relu(self):
        layer = LayerSpec("r", "ReLU", {}, (), ("x",))
        out = forward(layer, [as_tensor([-1.0, 2.0])], {})
        assert out.tolist() == [0.0, 2.0]

    def test_dense_identity(self):
        layer = LayerSpec("d", "Dense", {"units": 3}, ("k", "b"), ("x",))
        w = {"k": as_tensor(np.eye(3)), "b": as_tensor(np.zeros(3))}
        x = as_tensor([[1.5, -2.0, 0.25]])
        out = forward(layer, [x], w)
        assert (out == x).all()

    def test_dense_hand_computed(self):
        # naive triple-loop oracle agrees: [1,1] @ [[1,2],[3,4]] = [4,6]
        layer = LayerSpec("d", "Dense", {"units": 2}, ("k", "b"), ("x",))
        w = {"k": as_tensor([[1.0, 2.0], [3.0, 4.0]]), "b": as_tensor([0.0, 0.0])}
        out = forward(layer, [as_tensor([[1.0, 1.0]])], w)
        assert out.tolist() == [[4.0, 6.0]]

    def test_missing_weight(self):
        layer = LayerSpec("d", "Dense", {"units": 2}, ("k", "b"), ("x",))
        with pytest.raises(MissingWeight):
            forward(layer, [as_tensor([[1.0, 1.0]])], {})

    def test_maxpool(self):
        layer = LayerSpec("p", "MaxPool2D", {"pool": 2, "stride": 2}, (), ("x",))
        x = as_tensor(np.arange(16).reshape(1, 4, 4, 1))
        out = forward(layer, [x], {})
        assert out.shape == (1, 2, 2, 1)
        assert out[0, :, :, 0].tolist() == [[5.0, 7.0], [13.0, 15.0]]

    def test_conv_matches_enumeration_oracle(self):
        rng = np.random.default_rng(7)
        for stride in (1, 2):
            for k in (1, 3):
                x = as_tensor(rng.standard_normal((1, 8, 8, 4)))
                kern = as_tensor(rng.standard_normal((k, k, 4, 3)))
                bias = as_tensor(rng.standard_normal(3))
                layer = LayerSpec(
                    "c", "Conv2D", {"kernel": k, "stride": stride, "filters": 3},
                    ("k", "b"), ("x",))
                got = forward(layer, [x], {"k": kern, "b": bias})
                want = conv2d_same_oracle(x, kern, bias, stride)
                # error relative to the unit input scale; pure ratios blow
                # up where the float32 sum cancels to near zero
                rel = np.abs(got - want) / np.maximum(np.abs(want), 1.0)
                assert rel.max() < 1e-5


class TestRunModel:
    def test_input_relu(self):
        out = run_model(relu_graph(), as_tensor([[-1.0, 2.0]]))
        assert out.tolist() == [[0.0, 2.0]]

    def test_identity_graph(self):
        x = as_tensor([[1.0, -2.0, 3.0, 0.5]])
        out = run_model(identity_graph((1, 4)), x)
        assert (out == x).all()

    def test_equals_manual_fold(self):
        g = make_chain(5, width=6, seed=3)
        x = random_input(g, np.random.default_rng(0))
        # independent fold: walk layers by hand in topo order
        values = {}
        for lid in topo_order(g):
            layer = g.layer(lid)
            ins = [x] if layer.kind == "Input" else [values[i] for i in layer.inputs]
            values[lid] = forward(layer, ins, g.weights)
        assert (run_model(g, x) == values[g.exit]).all()

    def test_deterministic(self):
        g = make_resnet(2, seed=11)
        x = random_input(g, np.random.default_rng(1))
        a = run_model(g, x)
        b = run_model(g, x)
        assert a.tobytes() == b.tobytes()

    @pytest.mark.parametrize("seed", range(12))
    def test_shape_soundness_random_graphs(self, seed):
        g = random_model(seed)
        shapes = infer_shapes(g)
        x = random_input(g, np.random.default_rng(seed + 100))
        values = {}
        for lid in topo_order(g):
            layer = g.layer(lid)
            ins = [x] if layer.kind == "Input" else [values[i] for i in layer.inputs]
            values[lid] = forward(layer, ins, g.weights)
            assert tuple(values[lid].shape) == shapes[lid], lid

    def test_composition_at_edge_cut(self):
        # run head then tail across a single-edge cut, bit-exact
        g = make_chain(6, width=8, seed=5)
        x = random_input(g, np.random.default_rng(2))
        whole = run_model(g, x)
        order = topo_order(g)
        values = {}
        for lid in order[:4]:
            layer = g.layer(lid)
            ins = [x] if layer.kind == "Input" else [values[i] for i in layer.inputs]
            values[lid] = forward(layer, ins, g.weights)
        mid = values[order[3]]
        for lid in order[4:]:
            layer = g.layer(lid)
            values[lid] = forward(layer, [values[i] for i in layer.inputs], g.weights)
        assert (values[g.exit] == whole).all()
        assert mid is not None


class TestTextAndDisk:
    def test_text_round_trip(self):
        g = make_resnet(2, seed=4)
        text = graph_to_text(g)
        g2 = graph_from_text(text, g.weights)
        assert graph_to_text(g2) == text

    def test_text_is_canonical(self):
        g = make_chain(4, seed=9)
        assert graph_to_text(g) == graph_to_text(g)
        assert " " not in graph_to_text(g)

    def test_save_load_round_trip(self, tmp_path):
        g = make_resnet(1, seed=8)
        save_model(g, tmp_path / "m")
        g2 = load_model(tmp_path / "m")
        assert graph_to_text(g2) == graph_to_text(g)
        for name, w in g.weights.items():
            assert g2.weights[name].tobytes() == w.tobytes()
        x = random_input(g, np.random.default_rng(3))
        assert (run_model(g2, x) == run_model(g, x)).all()

    def test_weight_blob_layout(self, tmp_path):
        from defer.model import write_weight_blob

        blob = write_weight_blob(as_tensor([[1.0, 2.0]]))
        # rank=2 then extents 1,2 as u64le, then 2 float32le
        assert blob[:8] == (2).to_bytes(8, "little")
        assert blob[8:16] == (1).to_bytes(8, "little")
        assert blob[16:24] == (2).to_bytes(8, "little")
        assert np.frombuffer(blob[24:], dtype="<f4").tolist() == [1.0, 2.0]


class TestValidation:
    def test_add_arity(self):
        with pytest.raises(ModelInvalid):
            LayerSpec("a", "Add", {}, (), ("x",))

    def test_input_no_inputs(self):
        with pytest.raises(ModelInvalid):
            LayerSpec("i", "Input", {"shape": (1, 2)}, (), ("x",))

    def test_stranded_layer_rejected(self):
        layers = (
            LayerSpec("input", "Input", {"shape": (1, 2)}),
            LayerSpec("used", "ReLU", {}, (), ("input",)),
            LayerSpec("dangling", "ReLU", {}, (), ("input",)),
        )
        with pytest.raises(ModelInvalid):
            ModelGraph(layers, {}, "input", "used")

    def test_rank_zero_tensor_rejected(self):
        with pytest.raises(ModelInvalid):
            as_tensor(3.0)
