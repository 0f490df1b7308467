import itertools

import numpy as np
import pytest

from gendet.masks import (LayoutError, SeqLayout, build_detection_mask, build_generation_mask, mask_from_text,
                             mask_to_text)

T, F = True, False


def det_oracle(n_gen, n_det, n_instr, n_ans, text_in_smsa=True, smsa_on=True):
    """Rule-by-rule enumeration, one (row, column) pair at a time."""
    n = n_gen + n_det + n_instr + n_ans

    def seg(i):
        if i < n_gen:
            return "gen"
        if i < n_gen + n_det:
            return "det"
        if i < n_gen + n_det + n_instr:
            return "instr"
        return "ans"

    m = np.zeros((n, n), bool)
    for i in range(n):
        for j in range(n):
            r, c = seg(i), seg(j)
            if r == "gen":
                ok = c == "gen"
            elif r == "det":
                ok = c == "det" or (c == "gen" and smsa_on) or (c == "instr" and text_in_smsa)
            else:
                ok = (c in ("instr", "ans") and j <= i) or c == "det" or (c == "gen" and smsa_on)
            m[i, j] = ok
    return m


def gen_oracle(n_cap, n_lat):
    n = n_cap + n_lat
    m = np.zeros((n, n), bool)
    for i in range(n):
        for j in range(n):
            if i < n_cap:
                m[i, j] = j < n_cap and j <= i
            else:
                m[i, j] = True
    return m


def test_generation_example_two_plus_two():
    m = build_generation_mask(SeqLayout.for_generation(2, 2))
    assert m.tolist() == [[T, F, F, F], [T, T, F, F], [T, T, T, T], [T, T, T, T]]


def test_generation_minimal():
    assert build_generation_mask(SeqLayout.for_generation(1, 1)).tolist() == [[T, F], [T, T]]


@pytest.mark.parametrize("k", [1, 2, 5])
def test_generation_no_caption_is_bidirectional(k):
    assert build_generation_mask(SeqLayout.for_generation(0, k)).all()


def test_generation_rejects_detection_tokens():
    with pytest.raises(LayoutError):
        build_generation_mask(SeqLayout(n_gen=2, n_det=1))


def test_detection_example_one_one_one():
    m = build_detection_mask(SeqLayout.for_detection(1, 1, 1))
    assert m.tolist() == [[T, F, F], [T, T, T], [T, T, T]]


def test_detection_rejects_missing_det():
    with pytest.raises(LayoutError):
        build_detection_mask(SeqLayout(n_gen=2, n_det=0, text_spans=()))


def test_detection_text_is_causal():
    m = build_detection_mask(SeqLayout.for_detection(1, 1, 2))
    assert not m[2, 3] and m[3, 2]


GOLDEN_DET_2_2_2_1 = """
##.....
##.....
######.
######.
#####..
######.
#######
"""  # n_gen=2, n_det=2, instruction=2, answer=1


def test_golden_grid_with_answer():
    m = build_detection_mask(SeqLayout.for_detection(2, 2, 2, 1))
    expected = mask_from_text(GOLDEN_DET_2_2_2_1)
    # hand check of the grid itself: det rows do not see the answer column
    assert not expected[2, 6] and not expected[3, 6]
    np.testing.assert_array_equal(m, expected)


GOLDEN_GEN_3_2 = """
#....
##...
###..
#####
#####
"""


def test_golden_generation_grid():
    m = build_generation_mask(SeqLayout.for_generation(3, 2))
    np.testing.assert_array_equal(m, mask_from_text(GOLDEN_GEN_3_2))
    assert mask_to_text(m) == GOLDEN_GEN_3_2.strip()


@pytest.mark.parametrize("n_gen,n_det,n_text", list(itertools.product(range(1, 5), repeat=3)))
def test_detection_matches_oracle_up_to_four(n_gen, n_det, n_text):
    for n_ans in range(n_text):
        n_instr = n_text - n_ans
        layout = SeqLayout.for_detection(n_gen, n_det, n_instr, n_ans)
        for tis, son in itertools.product((True, False), repeat=2):
            got = build_detection_mask(layout, text_in_smsa=tis, smsa_on=son)
            np.testing.assert_array_equal(got, det_oracle(n_gen, n_det, n_instr, n_ans, tis, son))
            assert got.diagonal().all() and got.any(axis=1).all()
            # no z_gen row ever reaches a det or text column
            assert not got[:n_gen, n_gen:].any()


@pytest.mark.parametrize("n_cap,n_lat", list(itertools.product(range(0, 5), range(1, 5))))
def test_generation_matches_oracle_up_to_four(n_cap, n_lat):
    m = build_generation_mask(SeqLayout.for_generation(n_cap, n_lat))
    np.testing.assert_array_equal(m, gen_oracle(n_cap, n_lat))
    assert m[n_cap:, n_cap:].all()
    np.testing.assert_array_equal(m[:n_cap, :n_cap], np.tril(np.ones((n_cap, n_cap), bool)))


def test_builders_are_pure():
    layout = SeqLayout.for_detection(3, 2, 2, 2)
    a = build_detection_mask(layout)
    b = build_detection_mask(layout)
    assert a.tobytes() == b.tobytes() and a is not b


def test_text_round_trip():
    m = build_detection_mask(SeqLayout.for_detection(2, 3, 2))
    np.testing.assert_array_equal(mask_from_text(mask_to_text(m)), m)
