import pytest

from distillkit.graph import (
    FORMAT_HEADER,
    GraphBuilder,
    GraphError,
    GraphParseError,
    LayerGraph,
    LayerNode,
)


def small_graph() -> LayerGraph:
    b = GraphBuilder()
    x = b.input("in", 3)
    x = b.conv("c1", x, 3, 8, kernel=3, stride=1, padding=1)
    x = b.bn("b1", x, 8)
    x = b.relu("r1", x)
    x = b.add("gap", "avgpool_global", {}, (x,))
    x = b.add("fc", "linear", {"in_features": 8, "out_features": 4}, (x,))
    b.add("head", "softmax_head", {}, (x,))
    return b.graph


def test_validate_accepts_well_formed_graph():
    small_graph().validate()


def test_duplicate_id_rejected():
    g = LayerGraph()
    g.add(LayerNode("in", "input", {"channels": 3}))
    with pytest.raises(GraphError, match="duplicate"):
        g.add(LayerNode("in", "input", {"channels": 3}))


def test_unknown_kind_rejected():
    with pytest.raises(GraphError, match="unknown kind"):
        LayerNode("x", "teleport", {})


def test_missing_params_rejected():
    with pytest.raises(GraphError, match="expected params"):
        LayerNode("x", "conv2d", {"in_channels": 3})


def test_unknown_input_reference_rejected():
    g = LayerGraph()
    with pytest.raises(GraphError, match="unknown input"):
        g.add(LayerNode("c", "relu", {}, ("ghost",)))


def test_channel_mismatch_rejected():
    b = GraphBuilder()
    x = b.input("in", 3)
    b.conv("c1", x, 4, 8)  # upstream has 3 channels, conv claims 4
    with pytest.raises(GraphError, match="in_channels"):
        b.graph.out_channels()


def test_add_requires_equal_channels():
    b = GraphBuilder()
    x = b.input("in", 3)
    a = b.conv("c1", x, 3, 8)
    c = b.conv("c2", x, 3, 4)
    b.add("sum", "add", {}, (a, c))
    with pytest.raises(GraphError, match="equal channels"):
        b.graph.out_channels()


def test_concat_sums_channels():
    b = GraphBuilder()
    x = b.input("in", 3)
    a = b.conv("c1", x, 3, 8)
    c = b.conv("c2", x, 3, 4)
    b.add("cat", "concat", {}, (a, c))
    assert b.graph.out_channels()["cat"] == 12


def test_exactly_one_input_required():
    g = LayerGraph()
    g.add(LayerNode("a", "input", {"channels": 3}))
    g.add(LayerNode("b", "input", {"channels": 3}))
    with pytest.raises(GraphError, match="exactly one input"):
        g.validate()


def test_single_output_required():
    b = GraphBuilder()
    x = b.input("in", 3)
    b.conv("c1", x, 3, 8)
    b.conv("c2", x, 3, 4)
    with pytest.raises(GraphError, match="exactly one output"):
        b.graph.validate()


def test_serialize_parse_round_trip():
    g = small_graph()
    text = g.serialize()
    assert text.startswith(FORMAT_HEADER)
    assert LayerGraph.parse(text) == g
    assert LayerGraph.parse(text).serialize() == text


def test_save_load_round_trip(tmp_path):
    g = small_graph()
    path = tmp_path / "model.graph"
    g.save(path)
    assert LayerGraph.load(path) == g


def test_parse_rejects_missing_header():
    with pytest.raises(GraphParseError) as err:
        LayerGraph.parse("in input channels=3 <- -\n")
    assert err.value.line == 1


def test_parse_reports_line_number():
    text = FORMAT_HEADER + "\nin input channels=3 <- -\nbroken line here\n"
    with pytest.raises(GraphParseError) as err:
        LayerGraph.parse(text)
    assert err.value.line == 3


def test_parse_rejects_bad_param_value():
    text = FORMAT_HEADER + "\nin input channels=three <- -\n"
    with pytest.raises(GraphParseError) as err:
        LayerGraph.parse(text)
    assert err.value.line == 2


def test_parse_skips_comments_and_blank_lines():
    text = FORMAT_HEADER + "\n\n# a comment\nin input channels=3 <- -\n"
    g = LayerGraph.parse(text)
    assert len(g) == 1
