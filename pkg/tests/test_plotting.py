import xml.etree.ElementTree as ET

import numpy as np
import pytest

from promptreloc.plotting import (Svg, accuracy_curves, attention_heatmap, attention_matrix, counts_over_epochs,
                                  distribution_bars)
from promptreloc.prompts import Distribution, history_record
from promptreloc.verify import toy_model
from promptreloc.vit import prompt_init

NS = "{http://www.w3.org/2000/svg}"


def parse(svg: Svg):
    return ET.fromstring(svg.to_string())


def test_svg_is_well_formed_and_escapes_text():
    s = Svg(100, 50)
    s.text(10, 10, "a < b & c")
    s.polyline([0, 1], [2, 3])
    root = parse(s)
    assert root.tag == NS + "svg"
    assert root.find(NS + "text").text == "a < b & c"


def test_counts_over_epochs():
    hist = [history_record(1, Distribution([1, 1, 3, 0], 3), None),
            history_record(2, Distribution([2, 1, 3, 3], 3), None)]
    np.testing.assert_array_equal(counts_over_epochs(hist, 3), [[2, 0, 1], [1, 1, 2]])


def test_single_epoch_history_gives_one_frame():
    root = parse(distribution_bars([history_record(1, Distribution([1, 2, 2], 3), None)], 3))
    labels = [t.text for t in root.iter(NS + "text") if t.text.startswith("epoch")]
    assert labels == ["epoch 1"]


def test_fixed_distribution_gives_flat_bars():
    D = Distribution.uniform(6, 3)
    hist = [history_record(e, D, None) for e in range(1, 6)]
    root = parse(distribution_bars(hist, 3))
    heights = {float(r.get("height")) for r in root.iter(NS + "rect") if r.get("fill") != "white"}
    assert len(heights) == 1 and heights.pop() > 0


def test_frames_are_capped():
    hist = [history_record(e, Distribution([1, 2], 2), None) for e in range(1, 31)]
    root = parse(distribution_bars(hist, 2, max_frames=5))
    assert sum(t.text.startswith("epoch") for t in root.iter(NS + "text")) == 5


def test_empty_inputs_are_errors():
    with pytest.raises(ValueError):
        distribution_bars([], 3)
    with pytest.raises(ValueError):
        accuracy_curves({})


def test_accuracy_curves_one_polyline_per_strategy():
    svg = accuracy_curves({"a": ([1, 2, 3], [0.5, 0.6, 0.7]), "b": ([1, 2, 3], [0.5, 0.5, 0.5])})
    assert len(list(parse(svg).iter(NS + "polyline"))) == 2


def test_attention_rows_sum_to_at_most_one():
    rng = np.random.default_rng(0)
    model = toy_model(rng, num_blocks=3)
    x = rng.standard_normal((4, 8, 8, 1))
    D = Distribution([1, 1, 3, 0, 3], 3)
    M = attention_matrix(model, x, prompt_init(5, 8, rng), D)
    assert M.shape == (3, 5)
    assert np.all(M.sum(axis=1) <= 1 + 1e-12) and np.all(M >= 0)
    assert np.all(M[:, 3] == 0) and np.all(M[1] == 0)
    assert M[0, :2].sum() > 0
    assert len([r for r in parse(attention_heatmap(M)).iter(NS + "rect")]) == 1 + 15
