import math

import numpy as np
import pytest
import scipy.linalg

from tnmera import entanglement as ent
from tnmera.tensor import rng_stream


def bits(n, s):
    """Pixel values of basis index s, pixel 0 most significant."""
    return [(s >> (n - 1 - k)) & 1 for k in range(n)]


def bell_table(n=2):
    return np.array([float(bits(n, s)[0] == bits(n, s)[1]) for s in range(1 << n)])


def oracle_entropy(psi, n, region):
    """Independent path: explicit index loops for rho, scipy's general eigensolver."""
    rest = [k for k in range(n) if k not in region]
    da, db = 1 << len(region), 1 << len(rest)
    m = np.zeros((da, db))
    for s in range(1 << n):
        b = bits(n, s)
        ia = int("".join(str(b[k]) for k in region), 2)
        ib = int("".join(str(b[k]) for k in rest), 2) if rest else 0
        m[ia, ib] = psi[s]
    lam = np.real(scipy.linalg.eigvals(m @ m.T))
    lam = lam[lam > 1e-300]
    return float(-np.sum(lam * np.log(lam)) / math.log(2))


def test_golden_state():
    np.testing.assert_allclose(ent.golden_state(np.ones(4)).amplitudes, [0.5] * 4, atol=1e-15)
    np.testing.assert_array_equal(ent.golden_state([0, 0, 0, 7]).amplitudes, [0, 0, 0, 1])
    with pytest.raises(ent.EntanglementError):
        ent.golden_state(np.zeros(4))
    with pytest.raises(ent.EntanglementError):
        ent.golden_state(np.ones(1 << 21))
    with pytest.raises(ent.EntanglementError):
        ent.golden_state(np.ones(6))


def test_rdm_examples():
    state = ent.golden_state(np.ones(8))
    rho = ent.reduced_density_matrix(state, [0, 2])
    np.testing.assert_allclose(rho, np.full((4, 4), 0.25), atol=1e-15)
    rho = ent.reduced_density_matrix(ent.golden_state(bell_table()), [0])
    np.testing.assert_allclose(rho, np.diag([0.5, 0.5]), atol=1e-15)
    for bad in ([], [0, 1, 2]):
        with pytest.raises(ent.EntanglementError):
            ent.reduced_density_matrix(state, bad)
    big = ent.golden_state(np.ones(1 << 14))
    with pytest.raises(ent.EntanglementError):
        ent.reduced_density_matrix(big, list(range(13)))


def test_rdm_reshape_oracle():
    psi = rng_stream(0, "rdm").standard_normal(256)
    state = ent.golden_state(psi)
    m = state.amplitudes.reshape(8, 32)  # pixels 0..2 are the leading bits
    np.testing.assert_allclose(ent.reduced_density_matrix(state, [0, 1, 2]), m @ m.T, atol=1e-14)


def test_mask_forms_agree():
    state = ent.golden_state(rng_stream(1, "mask").standard_normal(64))
    a = ent.reduced_density_matrix(state, [1, 4])
    b = ent.reduced_density_matrix(state, 0b010010)
    c = ent.reduced_density_matrix(state, np.array([0, 1, 0, 0, 1, 0], dtype=bool))
    assert np.array_equal(a, b) and np.array_equal(a, c)


def test_entropy_examples():
    assert ent.entropy(np.diag([1.0, 0.0])) == 0.0
    assert ent.entropy(np.diag([0.5, 0.5])) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ent.EntanglementError):
        ent.entropy(np.diag([1.5, -0.5]))
    with pytest.raises(ent.EntanglementError):
        ent.entropy(np.array([[0.5, 0.2], [0.0, 0.5]]))


def test_entropy_matches_oracle_and_symmetry():
    for seed in range(3):
        psi = ent.golden_state(rng_stream(seed, "ent").standard_normal(1 << 8))
        region = [0, 3, 5, 6]
        s = ent.entropy(ent.reduced_density_matrix(psi, region))
        assert abs(s - oracle_entropy(psi.amplitudes, 8, region)) <= 1e-9
        comp = [k for k in range(8) if k not in region]
        assert abs(s - ent.entropy(ent.reduced_density_matrix(psi, comp))) <= 1e-9
        assert 0 <= s <= 4 + 1e-12


def test_straight_cuts_and_boundary():
    cuts = ent.straight_cuts((4, 3))
    assert sorted(cuts) == ["h1", "h2", "h3", "v1", "v2"]
    assert ent.boundary_length(cuts["v1"], (4, 3)) == 4
    assert ent.boundary_length(cuts["h2"], (4, 3)) == 3
    assert ent.boundary_length([0], (3, 3)) == 2


def test_area_law_bell_pair():
    rows = ent.area_law_check(bell_table(4), (2, 2), 1, ["v1"])
    assert rows[0]["S_bits"] == pytest.approx(1.0, abs=1e-12)
    assert rows[0]["L_AB"] == 2 and rows[0]["ok"]


def test_area_law_constant_function():
    for row in ent.area_law_check(np.ones(1 << 6), (2, 3), 1):
        assert abs(row["S_bits"]) <= 1e-12 and row["ok"]


def test_area_law_rejects_bent_cut():
    with pytest.raises(ent.EntanglementError):
        ent.area_law_check(np.ones(16), (2, 2), 1, [[0]])
    with pytest.raises(ent.EntanglementError):
        ent.area_law_check(np.ones(16), (2, 2), 1, ["d1"])


def test_area_law_mask_cut_named():
    rows = ent.area_law_check(ent.r_local_function((2, 3), 1, 0), (2, 3), 1, [[3, 4, 5]])
    assert rows[0]["cut_id"] == "h1"


def test_r_local_clauses_within_radius():
    for r in (1, 2):
        for window in ent.clause_windows((4, 4), r):
            pts = [divmod(k, 4) for k in window]
            assert max(max(abs(a[0] - b[0]), abs(a[1] - b[1])) for a in pts for b in pts) <= r


def test_product_of_clauses_oracle():
    geometry = (2, 2)
    windows = [[0, 1], [1, 3]]
    table = ent.product_of_clauses(geometry, windows, seed=4)
    c0 = rng_stream(4, "clause", 0).standard_normal((2, 2))
    c1 = rng_stream(4, "clause", 1).standard_normal((2, 2))
    for s in range(16):
        b = bits(4, s)
        assert table[s] == pytest.approx(c0[b[0], b[1]] * c1[b[1], b[3]], rel=1e-14)


def test_report_csv(tmp_path):
    rows = ent.area_law_check(ent.r_local_function((2, 2), 1, 0), (2, 2), 1)
    ent.write_report(tmp_path / "r.csv", rows)
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "cut_id,|A|,L_AB,S_bits,bound_bits,ok"
    assert len(lines) == 1 + len(rows)


def test_o2i_scaling_data():
    rows = ent.o2i_scaling((3, 3), radii=(0.5, 1.5), seeds=range(2))
    assert [r["object_pixels"] for r in rows] == [1, 9]
    assert rows[0]["mean_S_bits"] == pytest.approx(0.0, abs=1e-12)
    assert all(0 <= r["eta"] <= 1 for r in rows)
