import pytest

from vsml.plotting import PlotSpec, SchemaError, render_plot


def write(path, text):
    path.write_text(text)
    return path


def test_learning_curve_deterministic(tmp_path):
    src = write(tmp_path / "m.csv", "step,mean_cum_acc\n0,0.5\n1,0.75\n2,0.7\n")
    a = render_plot(src, PlotSpec.learning_curve(), tmp_path / "a.svg")
    b = render_plot(src, PlotSpec.learning_curve(), tmp_path / "b.svg")
    assert a == b and (tmp_path / "a.svg").read_text() == a
    assert 'id="series-0"' in a and a.count(",") >= 3


def test_missing_columns_named(tmp_path):
    src = write(tmp_path / "m.csv", "step,loss\n0,1\n")
    with pytest.raises(SchemaError, match="missing columns: mean_cum_acc"):
        render_plot(src, PlotSpec.learning_curve())


def test_empty_file(tmp_path):
    with pytest.raises(SchemaError):
        render_plot(write(tmp_path / "e.csv", ""), PlotSpec.learning_curve())


def test_introspection_markers(tmp_path):
    src = write(tmp_path / "t.csv", "step,loss,correct,predicted,label,prob_0,prob_1\n"
                                    "0,0.7,0,1,0,0.4,0.6\n1,0.3,1,0,0,0.7,0.3\n")
    svg = render_plot(src, PlotSpec.introspection(2, "t & t"))
    assert 'id="marker-0"' in svg and 'id="marker-1"' in svg
    assert svg.count("<circle") == 4 + 2   # 2 markers per row plus 2 legend dots
    assert "t &amp; t" in svg


def test_header_only(tmp_path):
    svg = render_plot(write(tmp_path / "h.csv", "step,mean_cum_acc\n"), PlotSpec.learning_curve())
    assert "series-0" not in svg and "legend" in svg
