import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from molflae.moldata import (
    AtomCountPrior,
    AtomVocabulary,
    Molecule,
    XYZFormatError,
    center,
    fit_atom_count_prior,
    format_xyz,
    load_vocabulary,
    load_xyz,
    one_hot,
    sample_atom_count,
    write_xyz,
)

coords_st = st.integers(1, 12).flatmap(
    lambda n: arrays(np.float64, (n, 3), elements=st.floats(-50, 50, allow_nan=False))
)


def test_vocabularies_ship_with_tables(vocab):
    assert vocab.symbols == ["H", "C", "N", "O", "F"]
    assert vocab.size == 5
    assert vocab.bond_length("C", "H", 1) == vocab.bond_length("H", "C", 1) == 109
    drugs = load_vocabulary("drugs")
    assert "H" not in drugs and "Cl" in drugs
    assert load_vocabulary("drugs_h").size == drugs.size + 1


def test_vocabulary_invariants():
    with pytest.raises(ValueError):
        AtomVocabulary(["C", "C"], {"C": [4]})
    with pytest.raises(ValueError):
        AtomVocabulary(["C"], {"C": [4]})
    with pytest.raises(ValueError):
        AtomVocabulary(["C", "Q"], {"C": [4]})
    with pytest.raises(ValueError):
        AtomVocabulary(["C", "N"], {"C": [4], "N": [3]}, {("C", "N", 1): 147, ("N", "C", 1): 150})


def test_vocabulary_dict_roundtrip(vocab):
    again = AtomVocabulary.from_dict(vocab.to_dict())
    assert again.symbols == vocab.symbols
    assert again.bond_length_table == vocab.bond_length_table
    assert again.valence_table == vocab.valence_table


def test_unknown_vocabulary():
    with pytest.raises(KeyError):
        load_vocabulary("nope")


def test_single_atom_block(tmp_path, vocab):
    p = tmp_path / "one.xyz"
    p.write_text("1\n\nC 0 0 0\n")
    (m,) = load_xyz(p, vocab)
    assert m.num_atoms == 1
    assert m.symbols(vocab) == ["C"]
    np.testing.assert_array_equal(m.coords, [[0, 0, 0]])


def test_two_blocks_keep_order(tmp_path, vocab):
    p = tmp_path / "two.xyz"
    p.write_text("1\nfirst\nC 0 0 0\n2\nsecond\nO 0 0 0\nH 0 0 0.96\n")
    mols = load_xyz(p, vocab)
    assert [m.name for m in mols] == ["first", "second"]
    assert [m.num_atoms for m in mols] == [1, 2]


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("1\n\nXx 0 0 0\n", "unknown element 'Xx'"),
        ("one\n\nC 0 0 0\n", "malformed atom count"),
        ("1\n\nC 0 zero 0\n", "non-numeric"),
        ("3\n\nC 0 0 0\n", "truncated"),
    ],
)
def test_xyz_errors(tmp_path, vocab, text, fragment):
    p = tmp_path / "bad.xyz"
    p.write_text(text)
    with pytest.raises(XYZFormatError, match=fragment):
        load_xyz(p, vocab)


def test_unknown_element_reports_line(tmp_path, vocab):
    p = tmp_path / "bad.xyz"
    p.write_text("2\n\nC 0 0 0\nXx 1 0 0\n")
    with pytest.raises(XYZFormatError, match="line 4"):
        load_xyz(p, vocab)


@given(coords_st, st.integers(0, 2**32 - 1))
def test_xyz_roundtrip(tmp_path_factory, coords, seed):
    vocab = load_vocabulary("qm9")
    types = np.random.default_rng(seed).integers(0, vocab.size, len(coords))
    m = Molecule(coords, types, "roundtrip")
    p = tmp_path_factory.mktemp("xyz") / "m.xyz"
    write_xyz(p, [m], vocab, precision=8)
    (back,) = load_xyz(p, vocab)
    np.testing.assert_array_equal(back.types, m.types)
    np.testing.assert_allclose(back.coords, m.coords, atol=1e-8)
    assert back.name == "roundtrip"


def test_molecule_validation():
    with pytest.raises(ValueError):
        Molecule(np.zeros((0, 3)), [])
    with pytest.raises(ValueError):
        Molecule([[0, 0, np.nan]], [0])
    with pytest.raises(ValueError):
        Molecule(np.zeros((2, 3)), [0])


def test_center_examples():
    m = Molecule([[1, 0, 0], [-1, 0, 0]], [1, 1])
    np.testing.assert_array_equal(center(m).coords, m.coords)
    np.testing.assert_array_equal(center(Molecule([[2, 2, 2]], [1])).coords, [[0, 0, 0]])


@given(coords_st, arrays(np.float64, 3, elements=st.floats(-100, 100)))
def test_center_properties(coords, shift):
    m = Molecule(coords, np.zeros(len(coords), dtype=int))
    c = center(m)
    assert np.abs(c.coords.mean(axis=0)).max() <= 1e-9
    np.testing.assert_allclose(center(c).coords, c.coords, atol=1e-9)
    np.testing.assert_allclose(center(m.translated(shift)).coords, c.coords, atol=1e-9)
    np.testing.assert_array_equal(c.types, m.types)


def test_one_hot_examples():
    v3 = AtomVocabulary(["C", "N", "O"], {"C": [4], "N": [3], "O": [2]})
    np.testing.assert_array_equal(one_hot(Molecule([[0, 0, 0]], [0]), v3), [[1, 0, 0]])
    np.testing.assert_array_equal(one_hot(Molecule(np.zeros((2, 3)), [2, 2]), v3), [[0, 0, 1], [0, 0, 1]])


@given(st.lists(st.integers(0, 4), min_size=1, max_size=20))
def test_one_hot_rows_are_basis_vectors(types):
    vocab = load_vocabulary("qm9")
    oh = one_hot(Molecule(np.zeros((len(types), 3)), types), vocab)
    np.testing.assert_array_equal(oh.sum(1), 1.0)
    assert set(np.unique(oh)) <= {0.0, 1.0}
    np.testing.assert_array_equal(oh.argmax(1), types)


def _mols_of_sizes(sizes):
    return [Molecule(np.zeros((n, 3)), np.zeros(n, dtype=int)) for n in sizes]


def test_atom_count_prior_counts():
    prior = fit_atom_count_prior(_mols_of_sizes([3, 3, 5]))
    assert prior.counts == pytest.approx({3: 2 / 3, 5: 1 / 3}, abs=1e-12)


def test_atom_count_prior_single_size(rng):
    prior = fit_atom_count_prior(_mols_of_sizes([7, 7]))
    assert set(sample_atom_count(prior, rng, size=100).tolist()) == {7}
    assert sample_atom_count(prior, rng) == 7


def test_atom_count_prior_frequency(rng):
    prior = AtomCountPrior({3: 2 / 3, 5: 1 / 3})
    draws = sample_atom_count(prior, rng, size=100_000)
    assert set(np.unique(draws)) <= {3, 5}
    assert 0.65 <= (draws == 3).mean() <= 0.67


def test_atom_count_prior_errors():
    with pytest.raises(ValueError):
        fit_atom_count_prior([])
    with pytest.raises(ValueError):
        AtomCountPrior({3: 0.5})
    with pytest.raises(ValueError):
        AtomCountPrior({0: 1.0})
    assert AtomCountPrior.from_dict(AtomCountPrior({2: 0.25, 4: 0.75}).to_dict()).counts == {2: 0.25, 4: 0.75}


def test_format_xyz_layout(vocab):
    text = format_xyz([Molecule([[0, 0, 0]], [1], "c")], vocab, precision=2)
    assert text == "1\nc\nC 0.00 0.00 0.00\n"
