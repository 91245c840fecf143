import math
import warnings

import numpy as np
import pytest

from stihc import io as sio
from stihc.errors import EmptyAfterFilter, NegativeValue, ParseError, StihcWarning, UnknownSpot
from stihc.ihc import make_partition
from stihc.mesh import SpotGrid, build_delaunay


def write(path, text):
    path.write_text(text)
    return path


@pytest.fixture
def tiny(tmp_path):
    counts = write(tmp_path / "c.tsv", "gene\ta\tb\tc\ng1\t1\t0\t2\ng2\t0\t5\t1\n")
    coords = write(tmp_path / "xy.csv", "spot_id,x,y\nc,1,1\na,0,0\nb,1,0\n")
    return counts, coords


class TestLoad:
    def test_well_formed(self, tiny):
        expr, grid = sio.load_dataset(*tiny)
        assert expr.shape == (2, 3)
        assert grid.spot_ids == ("c", "a", "b")
        # columns follow the coordinate order
        np.testing.assert_array_equal(expr.values, [[2, 1, 0], [1, 0, 5]])

    def test_unknown_spot(self, tmp_path, tiny):
        counts = write(tmp_path / "c2.tsv", "gene\ta\tzz\tc\ng1\t1\t0\t2\n")
        with pytest.raises(UnknownSpot):
            sio.load_dataset(counts, tiny[1])

    def test_zero_gene_dropped(self, tmp_path, tiny):
        counts = write(tmp_path / "c3.tsv", "gene\ta\tb\tc\ng1\t1\t0\t2\nz\t0\t0\t0\ng2\t0\t5\t1\n")
        with pytest.warns(StihcWarning, match="zero"):
            expr, _ = sio.load_dataset(counts, tiny[1])
        assert expr.genes == ("g1", "g2")

    def test_all_zero(self, tmp_path, tiny):
        counts = write(tmp_path / "c4.tsv", "gene\ta\tb\tc\nz\t0\t0\t0\n")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            with pytest.raises(EmptyAfterFilter):
                sio.load_dataset(counts, tiny[1])

    def test_parse_error_line_number(self, tmp_path, tiny):
        counts = write(tmp_path / "c5.tsv", "gene\ta\tb\tc\ng1\t1\t0\t2\ng2\t0\tx\t1\n")
        with pytest.raises(ParseError) as exc:
            sio.load_dataset(counts, tiny[1])
        assert exc.value.line == 3

    def test_ragged_row(self, tmp_path, tiny):
        counts = write(tmp_path / "c6.tsv", "gene\ta\tb\tc\ng1\t1\t0\n")
        with pytest.raises(ParseError):
            sio.load_dataset(counts, tiny[1])

    def test_bad_coords_header(self, tmp_path, tiny):
        coords = write(tmp_path / "bad.csv", "id,x,y\na,0,0\n")
        with pytest.raises(ParseError):
            sio.load_dataset(tiny[0], coords)

    def test_missing_file(self, tmp_path, tiny):
        with pytest.raises(ParseError):
            sio.load_dataset(tiny[0], tmp_path / "nope.csv")

    def test_extra_coordinate_spots_dropped(self, tmp_path, tiny):
        coords = write(tmp_path / "xy2.csv", "spot_id,x,y\nc,1,1\na,0,0\nb,1,0\nd,0,1\n")
        expr, grid = sio.load_dataset(tiny[0], coords)
        assert grid.spot_ids == ("c", "a", "b")


class TestRoundTrip:
    def test_dataset(self, tmp_path):
        rng = np.random.default_rng(0)
        grid = SpotGrid(tuple(f"s{i}" for i in range(6)), rng.uniform(size=(6, 2)))
        values = np.vstack([rng.poisson(3, 6), rng.uniform(size=6) * 1e-7 + 1 / 3]).astype(float)
        values[:, 0] += 1
        expr = sio.ExpressionMatrix(("a", "b"), grid.spot_ids, values)
        sio.write_dataset(tmp_path, expr, grid, {"a": "m1", "b": "m2"})
        back, bgrid = sio.load_dataset(tmp_path / "counts.tsv", tmp_path / "coords.csv")
        assert back.values.tobytes() == expr.values.tobytes()
        assert bgrid.coords.tobytes() == grid.coords.tobytes()
        assert sio.read_labels(tmp_path / "truth.csv") == {"a": "m1", "b": "m2"}

    def test_coefficients(self, tmp_path):
        C = np.random.default_rng(1).normal(size=(3, 4)) * 10.0 ** np.arange(-3, 1)
        sio.write_coefficients(tmp_path / "c.csv", ["x", "y", "z"], C)
        genes, back = sio.read_coefficients(tmp_path / "c.csv")
        assert genes == ("x", "y", "z")
        assert back.tobytes() == C.tobytes()
        assert (tmp_path / "c.csv").read_text().splitlines()[0] == "gene,c_1,c_2,c_3,c_4"

    def test_metrics_file(self, tmp_path):
        sio.write_metrics(tmp_path / "m.csv", {"ari": 1.0, "n_clusters": 4})
        assert (tmp_path / "m.csv").read_text() == "metric,value\nari,1.0\nn_clusters,4\n"


class TestNormalize:
    def test_values(self):
        e = sio.ExpressionMatrix(("g",), ("a", "b", "c"), [[0.0, math.e - 1, 3.0]])
        out = sio.log1p_normalize(e).values[0]
        assert out[0] == 0.0
        assert out[1] == pytest.approx(1.0, abs=1e-15)

    def test_zeros(self):
        e = sio.ExpressionMatrix(("g", "h"), ("a", "b"), np.zeros((2, 2)))
        assert not sio.log1p_normalize(e).values.any()

    def test_negative(self):
        with pytest.raises(NegativeValue):
            sio.log1p_normalize(sio.ExpressionMatrix(("g",), ("a", "b"), [[1.0, -1.0]]))


class TestRender:
    @pytest.fixture
    def setup(self):
        t = np.linspace(0, 1, 5)
        x, y = np.meshgrid(t, t)
        grid = SpotGrid(tuple(f"s{i}" for i in range(25)), np.column_stack([x.ravel(), y.ravel()]))
        mesh = build_delaunay(grid)
        C = np.vstack([mesh.nodes[:, 0], mesh.nodes[:, 1], mesh.nodes[:, 0] * 2])
        return mesh, C

    def test_one_file_per_cluster(self, tmp_path, setup):
        mesh, C = setup
        part = make_partition(C, [(0, 2), (1,)])
        paths = sio.render_cluster_means(mesh, C, part, "gaussian", tmp_path)
        assert [p.name for p in paths] == ["cluster_001.svg", "cluster_002.svg"]
        paths = sio.render_cluster_means(mesh, C, part, "gaussian", tmp_path / "s", surfaces=True)
        assert len(paths) == 4

    def test_singleton_renders_own_field(self, tmp_path, setup):
        mesh, C = setup
        part = make_partition(C, [(0, 2), (1,)])
        sio.render_cluster_means(mesh, C, part, "gaussian", tmp_path)
        expected = sio.spot_svg(mesh.nodes, C[1], "cluster 2 (1 genes)")
        assert (tmp_path / "cluster_002.svg").read_text() == expected

    def test_constant_field_single_colour(self):
        nodes = np.array([[0, 0], [1, 0], [0, 1], [1, 1.0]])
        svg = sio.spot_svg(nodes, np.full(4, 3.0))
        fills = {line.split('fill="')[1][:7] for line in svg.splitlines() if "<circle" in line}
        assert fills == {sio.ramp_color(0.0)}

    def test_ramp_endpoints(self):
        assert sio.ramp_color(0.0) == "#fff7bc"
        assert sio.ramp_color(1.0) == "#99000d"

    def test_deterministic(self, tmp_path, setup):
        mesh, C = setup
        part = make_partition(C, [(0, 1, 2)])
        a = sio.render_cluster_means(mesh, C, part, "poisson", tmp_path / "a", surfaces=True)
        b = sio.render_cluster_means(mesh, C, part, "poisson", tmp_path / "b", surfaces=True)
        for pa, pb in zip(a, b):
            assert pa.read_bytes() == pb.read_bytes()

    def test_surface_raster_size(self, setup):
        mesh, C = setup
        svg = sio.surface_svg(mesh, C[0], resolution=20)
        assert svg.count("<rect") == 400  # the unit square is its own hull

    def test_valid_xml(self, setup):
        import xml.etree.ElementTree as ET

        mesh, C = setup
        root = ET.fromstring(sio.spot_svg(mesh.nodes, C[0], "t"))
        assert root.tag.endswith("svg") and root.get("version") == "1.1"
