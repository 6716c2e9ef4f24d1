import pytest

from ustlab.errors import DomainError, ValidationError
from ustlab.lattice import WIRED_ROOT, Site, Window, box_sites, dist_inf, dist_l2sq, neighbors


def test_interior_neighbors():
    w = Window(3, 5)
    assert set(neighbors(Site(0, 0), w)) == {(1, 0), (-1, 0), (0, 1), (0, -1)}


def test_free_boundary_has_three_neighbors():
    w = Window(3, 5, "free")
    nb = neighbors(Site(5, 0), w)
    assert len(nb) == 3 and WIRED_ROOT not in nb


def test_wired_boundary_lists_root_once():
    w = Window(3, 5, "wired")
    nb = neighbors(Site(5, 0), w)
    assert len(nb) == 4 and nb.count(WIRED_ROOT) == 1
    corner = neighbors(Site(5, 5), w)
    assert corner.count(WIRED_ROOT) == 1 and len(corner) == 3


def test_outside_site_raises():
    with pytest.raises(DomainError):
        neighbors(Site(6, 0), Window(3, 5))


def test_metrics_examples():
    assert dist_inf((0, 0), (3, -4)) == 4
    assert dist_l2sq((0, 0), (3, -4)) == 25
    assert dist_inf((2, 7), (2, 7)) == 0 and dist_l2sq((2, 7), (2, 7)) == 0


def test_window_validation():
    with pytest.raises(ValidationError):
        Window(5, 4)
    with pytest.raises(ValidationError):
        Window(0, 4)
    with pytest.raises(ValidationError):
        Window(1, 2, "periodic")
    assert Window.with_margin(8, 4).L_out == 32


def test_index_round_trip():
    w = Window(2, 3)
    for i in range(w.n_nodes):
        assert w.index(w.site(i)) == i
    assert w.sites(range(w.n_nodes)) == tuple(w.site(i) for i in range(w.n_nodes))


def test_box_sites():
    assert len(box_sites((1, 1), 2)) == 25
