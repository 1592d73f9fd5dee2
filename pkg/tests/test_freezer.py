import numpy as np
import pytest

from bonnet import ops
from bonnet.config import NetConfig
from bonnet.container import FrozenModel, read_frozen, write_frozen
from bonnet.errors import CorruptFileError, FreezeError
from bonnet.freezer import (fold_batch_norm, fold_batch_norm_pass, freeze,
                            optimize_graph, quantize_model, run_frozen,
                            strip_training_ops)
from bonnet.model import build_architecture, run_inference
from bonnet.tensor import Layout
from bonnet.trainer import load_checkpoint
from conftest import conv_chain_graph


def _toy_graph(keep=0.9):
    net = NetConfig("erfnet-mini", (1, 1), (8, 12), keep, 0.8)
    return build_architecture(net, 4, init_seed=2)


# ---------------------------------------------------------------------------
# strip


def test_strip_removes_dropout_only():
    graph = _toy_graph(keep=0.5)
    dropouts = sum(1 for n in graph.nodes if n.op.kind == "dropout")
    assert dropouts > 0
    stripped = strip_training_ops(graph)
    assert sum(1 for n in stripped.nodes if n.op.kind == "dropout") == 0
    assert len(stripped.nodes) == len(graph.nodes) - dropouts
    for node in stripped.nodes:
        if node.op.kind == "batch_norm":
            assert node.op.attrs["mode"] == "infer"


def test_strip_noop_without_dropout_or_bn():
    graph = conv_chain_graph(4, channels=2, dtype=np.float32)
    stripped = strip_training_ops(graph)
    assert [n.name for n in stripped.nodes] == [n.name for n in graph.nodes]
    assert [n.op.kind for n in stripped.nodes] == [n.op.kind for n in graph.nodes]


def test_strip_matches_infer_mode(rng):
    graph = _toy_graph(keep=0.6)
    stripped = strip_training_ops(graph)
    x = rng.random((1, 3, 16, 16)).astype(np.float32)
    want = run_inference(graph, x, wanted=("logits",))["logits"]
    got = run_inference(stripped, x, wanted=("logits",))["logits"]
    assert np.max(np.abs(want - got)) < 1e-6


def test_strip_requires_running_stats():
    graph = _toy_graph()
    victim = next(k for k in graph.state if k.endswith("running_mean"))
    del graph.state[victim]
    with pytest.raises(FreezeError, match="running_mean"):
        strip_training_ops(graph)


# ---------------------------------------------------------------------------
# batch-norm folding


def test_fold_identity_statistics(rng):
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    b = rng.normal(size=4).astype(np.float32)
    w2, b2 = fold_batch_norm(w, b, np.ones(4), np.zeros(4), np.zeros(4),
                             np.ones(4), eps=0.0)
    assert np.allclose(w2, w) and np.allclose(b2, b)


def test_fold_by_hand_example():
    # w=2, b=0, gamma=3, beta=1, mu=4, var=3, eps=1: scale=3/2 -> w'=3, b'=-5
    w = np.full((1, 1, 1, 1), 2.0)
    b = np.zeros(1)
    w2, b2 = fold_batch_norm(w, b, np.array([3.0]), np.array([1.0]),
                             np.array([4.0]), np.array([3.0]), eps=1.0)
    assert w2.reshape(-1)[0] == pytest.approx(3.0)
    assert b2[0] == pytest.approx(-5.0)


def test_folded_graph_matches_unfused(rng):
    graph = strip_training_ops(_toy_graph())
    folded = fold_batch_norm_pass(graph)
    assert sum(n.op.kind == "batch_norm" for n in folded.nodes) < \
        sum(n.op.kind == "batch_norm" for n in graph.nodes)
    x = rng.random((1, 3, 16, 16)).astype(np.float32)
    want = run_inference(graph, x, wanted=("logits",))["logits"]
    got = run_inference(folded, x, wanted=("logits",))["logits"]
    assert np.max(np.abs(want - got)) < 1e-5


def test_fuse_relu_preserves_output_and_names(rng):
    graph = optimize_graph(strip_training_ops(_toy_graph()))
    assert any(n.op.attrs.get("fused_relu") for n in graph.nodes)
    for role in ("code", "logits", "softmax", "argmax"):
        assert any(n.name == graph.named[role] for n in graph.nodes), role
    x = rng.random((1, 3, 16, 16)).astype(np.float32)
    base = strip_training_ops(_toy_graph())
    want = run_inference(base, x)
    got = run_inference(graph, x)
    assert np.max(np.abs(want["logits"] - got["logits"])) < 1e-5
    assert np.array_equal(want["argmax"], got["argmax"])


# ---------------------------------------------------------------------------
# quantization


def test_quantize_rejects_empty_calibration():
    stripped = strip_training_ops(_toy_graph())
    model = FrozenModel(stripped, "optimized", Layout.NCHW, (1, 3, 16, 16),
                        (), None)
    with pytest.raises(FreezeError, match="calibration"):
        quantize_model(model, [])


def test_quantized_weights_have_params(rng):
    stripped = optimize_graph(strip_training_ops(_toy_graph()))
    model = FrozenModel(stripped, "optimized", Layout.NCHW, (1, 3, 16, 16),
                        (), None)
    calib = [rng.random((1, 3, 16, 16)).astype(np.float32) for _ in range(2)]
    q = quantize_model(model, calib)
    kernel_names = [k for k in q.graph.params if k.endswith(".w")]
    assert kernel_names
    for name in kernel_names:
        assert q.graph.params[name].dtype == np.int8
        assert name in q.weight_quant
        assert q.weight_quant[name].zero_point == 0
    # every op output that feeds the mask path carries activation params
    skip = {q.graph.named["softmax"], q.graph.named["argmax"]}
    for node in q.graph.nodes:
        if node.op.kind != "argmax" and node.name not in skip:
            assert node.name in q.act_quant, node.name
    assert "input" in q.act_quant


def test_quantized_masks_close_to_float(rng):
    # mechanism check on an untrained net; the 95% bound runs on trained models
    stripped = optimize_graph(strip_training_ops(_toy_graph()))
    model = FrozenModel(stripped, "optimized", Layout.NCHW, (1, 3, 16, 16),
                        (), None)
    calib = [rng.random((1, 3, 16, 16)).astype(np.float32) for _ in range(4)]
    q = quantize_model(model, calib)
    x = calib[0]
    ref = run_frozen(model, x, wanted=("argmax", "logits"))
    got = run_frozen(q, x, wanted=("argmax", "logits"), quantized=True)
    agreement = float(np.mean(ref["argmax"] == got["argmax"]))
    assert agreement >= 0.85
    assert np.max(np.abs(ref["logits"] - got["logits"])) < 0.5


# ---------------------------------------------------------------------------
# container round trip


def _mini_frozen(rng):
    from bonnet.config import ClassDef, NodesConfig
    graph = strip_training_ops(_toy_graph())
    classes = tuple(ClassDef(i, f"c{i}", (i * 20, i * 30, i * 40)) for i in range(4))
    nodes = NodesConfig(**{r: graph.named[r]
                           for r in ("input", "code", "logits", "softmax", "argmax")})
    return FrozenModel(graph, "nchw", Layout.NCHW, (1, 3, 16, 16), classes, nodes)


def test_container_round_trip_byte_identical(tmp_path, rng):
    model = _mini_frozen(rng)
    path_a = tmp_path / "a.bnnf"
    write_frozen(model, path_a)
    loaded = read_frozen(path_a)
    path_b = tmp_path / "b.bnnf"
    loaded.nodes = model.nodes
    write_frozen(loaded, path_b)
    assert path_a.read_bytes() == path_b.read_bytes()


def test_container_preserves_values_and_outputs(tmp_path, rng):
    model = _mini_frozen(rng)
    path = tmp_path / "m.bnnf"
    write_frozen(model, path)
    loaded = read_frozen(path)
    assert loaded.variant == "nchw" and loaded.layout is Layout.NCHW
    assert loaded.input_dims == (1, 3, 16, 16)
    assert [c.name for c in loaded.classes] == [c.name for c in model.classes]
    x = rng.random((1, 3, 16, 16)).astype(np.float32)
    want = run_inference(model.graph, x, wanted=("logits",))["logits"]
    loaded.graph.named = dict(model.graph.named)
    got = run_inference(loaded.graph, x, wanted=("logits",))["logits"]
    assert np.array_equal(want, got)


def test_container_crc_detects_corruption(tmp_path, rng):
    model = _mini_frozen(rng)
    path = tmp_path / "m.bnnf"
    write_frozen(model, path)
    blob = bytearray(path.read_bytes())
    blob[100] ^= 0x55
    path.write_bytes(bytes(blob))
    with pytest.raises(CorruptFileError, match="checksum"):
        read_frozen(path)


def test_container_rejects_garbage(tmp_path):
    path = tmp_path / "junk.bnnf"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(CorruptFileError):
        read_frozen(path)


def test_frozen_model_rejects_dropout():
    from bonnet.model import GraphNode
    from bonnet.ops import OpSpec
    graph = conv_chain_graph(2, channels=2, dtype=np.float32)
    graph.nodes.insert(1, GraphNode("drop", OpSpec("dropout", {"keep_prob": 0.5}),
                                    (graph.nodes[0].name,)))
    model = FrozenModel(graph, "nchw", Layout.NCHW, (1, 2, 4, 4), (), None)
    with pytest.raises(FreezeError, match="dropout"):
        model.validate()


def test_frozen_model_rejects_train_mode_bn():
    graph = _toy_graph(keep=1.0)  # batch norms still in train mode
    model = FrozenModel(graph, "nchw", Layout.NCHW, (1, 3, 16, 16), (), None)
    with pytest.raises(FreezeError, match="infer mode"):
        model.validate()


# ---------------------------------------------------------------------------
# freeze end to end (uses the shared trained pipeline)


def test_freeze_writes_all_artifacts(trained_setup):
    out = trained_setup["out_dir"]
    for name in ("model_nchw.bnnf", "model_nhwc.bnnf", "model_optimized.bnnf",
                 "model_quantized.bnnf", "nodes.yaml", "data.yaml", "net.yaml"):
        assert (out / name).exists(), name


def test_freeze_variants_agree(trained_setup, rng):
    out = trained_setup["out_dir"]
    nchw = read_frozen(out / "model_nchw.bnnf")
    nhwc = read_frozen(out / "model_nhwc.bnnf")
    opt = read_frozen(out / "model_optimized.bnnf")
    from bonnet.config import load_config
    nodes = load_config(out / "nodes.yaml", "nodes")
    for m in (nchw, nhwc, opt):
        m.nodes = nodes
        m.graph.named = {r: getattr(nodes, r)
                         for r in ("input", "code", "logits", "softmax", "argmax")}
    x = rng.random((2, 3, 16, 16)).astype(np.float32)
    a = run_frozen(nchw, x, wanted=("logits", "argmax"))
    b = run_frozen(nhwc, x, wanted=("logits", "argmax"))
    c = run_frozen(opt, x, wanted=("logits", "argmax"))
    assert np.max(np.abs(a["logits"] - b["logits"])) < 1e-6
    assert np.array_equal(a["argmax"], b["argmax"])
    assert np.max(np.abs(a["logits"] - c["logits"])) < 1e-5


def test_freeze_matches_training_checkpoint(trained_setup, rng):
    out = trained_setup["out_dir"]
    graph, _, _ = load_checkpoint(trained_setup["log_dir"] / "best_iou")
    stripped = strip_training_ops(graph)
    nchw = read_frozen(out / "model_nchw.bnnf")
    from bonnet.config import load_config
    nodes = load_config(out / "nodes.yaml", "nodes")
    nchw.graph.named = {r: getattr(nodes, r)
                        for r in ("input", "code", "logits", "softmax", "argmax")}
    x = rng.random((1, 3, 16, 16)).astype(np.float32)
    want = run_inference(stripped, x, wanted=("logits",))["logits"]
    got = run_inference(nchw.graph, x, wanted=("logits",))["logits"]
    assert np.max(np.abs(want - got)) < 1e-6


def test_nodes_yaml_resolves_in_every_variant(trained_setup):
    from bonnet.config import load_config
    out = trained_setup["out_dir"]
    nodes = load_config(out / "nodes.yaml", "nodes")
    for variant in ("nchw", "nhwc", "optimized", "quantized"):
        model = read_frozen(out / f"model_{variant}.bnnf")
        names = {n.name for n in model.graph.nodes} | {"input"}
        for role in ("input", "code", "logits", "softmax", "argmax"):
            assert getattr(nodes, role) in names, (variant, role)


def test_freeze_requires_checkpoint(tmp_path):
    with pytest.raises(FreezeError, match="checkpoint"):
        freeze(tmp_path, "best_iou", tmp_path / "out")


def test_freeze_rejects_bad_which(trained_setup, tmp_path):
    with pytest.raises(FreezeError, match="which"):
        freeze(trained_setup["log_dir"], "best_loss", tmp_path / "o")


def test_freeze_deterministic_containers(trained_setup, tmp_path):
    out2 = tmp_path / "frozen2"
    freeze(trained_setup["log_dir"], "best_iou", out2)
    for name in ("model_nchw.bnnf", "model_nhwc.bnnf", "model_optimized.bnnf",
                 "model_quantized.bnnf"):
        a = (trained_setup["out_dir"] / name).read_bytes()
        b = (out2 / name).read_bytes()
        assert a == b, name
