import math
import os
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))
import diff_engine as de  # noqa: E402
from errors import (IntervalError, SignalTooShortError, SpecificationError, STLSyntaxError,  # noqa: E402
                    UnknownOperatorError, UnknownRegionError, VocabularyError)
from planar_env import default_environment  # noqa: E402
from stl_core import (And, Atom, Finally, Globally, Interval, Not, Or, Predicate, Until,  # noqa: E402
                      Vocabulary, aggregation_width, avoid, conjunction, horizon, linearize, load_spec_file,
                      parse, parse_tokens, reach, reach_choice, region_names, render_canonical, robustness,
                      robustness_trace, satisfaction_trace, satisfies, sequenced_visit, shift_intervals,
                      smooth_robustness, smooth_robustness_tensor, stabilize, subformulas, swap_regions,
                      validate_regions)

pytestmark = pytest.mark.unit

PHI1 = '((F[0,10](R1) | F[10,20](R2)) & F[20,30](R3)) & G[0,30](!O1)'
PHI2 = 'F[0,15](G[0,10](R1)) & G[0,30](!O1)'
PHI3 = 'F[0,15](R1 & F[0,15](R2))'
SPEC_DIR = os.path.join(os.path.dirname(__file__), '..', 'specs')


def px_signal(values):
    """(T, 4) signal whose px column is values and the rest zero"""
    s = np.zeros((len(values), 4))
    s[:, 0] = values
    return s


def px_gt(c):
    return Predicate((1.0, 0.0, 0.0, 0.0), -c)


# randomized formulas over affine predicates

@st.composite
def predicates(draw):
    weights = [0.0, 0.0, 0.0, 0.0]
    weights[draw(st.integers(0, 3))] = draw(st.sampled_from([-2.0, -1.0, 1.0, 0.5, 3.0]))
    return Predicate(tuple(weights), draw(st.sampled_from([-1.0, -0.25, 0.0, 0.5, 1.5])))


@st.composite
def intervals(draw, max_hi=4):
    lo = draw(st.integers(0, max_hi))
    return Interval(lo, draw(st.integers(lo, max_hi)))


def formulas(max_depth=4):
    leaves = st.one_of(predicates(), st.builds(Atom, st.sampled_from(['R1', 'R2', 'O1']),
                                               st.sampled_from(['inside', 'outside'])))
    strategy = leaves
    for _ in range(max_depth):
        children = strategy
        strategy = st.one_of(
            leaves,
            st.builds(Not, children),
            st.builds(And, children, children),
            st.builds(Or, children, children),
            st.builds(Finally, intervals(), children),
            st.builds(Globally, intervals(), children),
            st.builds(Until, intervals(3), children, children),
        )
    return strategy


@st.composite
def formula_and_signal(draw):
    f = draw(formulas())
    extra = draw(st.integers(0, 5))
    length = min(horizon(f) + 1 + extra, 41)
    rng = np.random.default_rng(draw(st.integers(0, 2 ** 32 - 1)))
    signal = np.column_stack([rng.uniform(0.0, 10.0, length), rng.uniform(0.0, 10.0, length),
                              rng.uniform(-2.0, 2.0, length), rng.uniform(-2.0, 2.0, length)])
    return f, signal


class TestParse:
    """Grammar, precedence and error reporting"""

    def test_finally(self):
        assert parse('F[0,10](R1)') == Finally(Interval(0, 10), Atom('R1'))

    def test_sequenced_visit_structure(self):
        assert parse(PHI3) == Finally(Interval(0, 15), And(Atom('R1'), Finally(Interval(0, 15), Atom('R2'))))

    def test_precedence_not_and_or(self):
        assert parse('!A & B | C') == Or(And(Not(Atom('A')), Atom('B')), Atom('C'))
        assert parse('A | B & C') == Or(Atom('A'), And(Atom('B'), Atom('C')))

    def test_left_associative(self):
        assert parse('A & B & C') == And(And(Atom('A'), Atom('B')), Atom('C'))

    def test_until_binds_loosest(self):
        assert parse('A | B U[0,3] C') == Until(Interval(0, 3), Or(Atom('A'), Atom('B')), Atom('C'))

    def test_temporal_binds_to_following_operand(self):
        assert parse('F[0,2] A & B') == And(Finally(Interval(0, 2), Atom('A')), Atom('B'))

    def test_outside_atom(self):
        assert parse('~O1') == Atom('O1', 'outside')

    def test_affine_predicate(self):
        f = parse('2*px - vy > 1.5')
        assert f == Predicate((2.0, 0.0, 0.0, -1.0), -1.5)
        assert parse('px < 3') == Predicate((-1.0, 0.0, 0.0, 0.0), 3.0)

    def test_unbalanced_parenthesis_offset(self):
        with pytest.raises(STLSyntaxError) as exc:
            parse('F[0,10](R1')
        assert exc.value.offset == 10
        assert 'offset 10' in str(exc.value)

    def test_stray_closing_parenthesis(self):
        with pytest.raises(STLSyntaxError) as exc:
            parse('R1)')
        assert exc.value.offset == 2

    def test_unknown_operator(self):
        with pytest.raises(UnknownOperatorError) as exc:
            parse('X[0,5](R1)')
        assert exc.value.offset == 0
        with pytest.raises(UnknownOperatorError) as exc:
            parse('R1 @ R2')
        assert exc.value.offset == 3
        with pytest.raises(UnknownOperatorError):
            parse('R1 -> R2')

    def test_offsets_are_bytes(self):
        with pytest.raises(UnknownOperatorError) as exc:
            parse('R1\u00a0@ R2')
        assert exc.value.offset == len('R1\u00a0'.encode('utf-8'))

    @pytest.mark.parametrize('text', ['F[5,2](R1)', 'F[-1,2](R1)', 'F[0,2.5](R1)', 'F[0,a](R1)'])
    def test_malformed_interval(self, text):
        with pytest.raises(IntervalError):
            parse(text)

    def test_interval_errors_are_specification_errors(self):
        with pytest.raises(SpecificationError):
            Interval(3, 1)
        with pytest.raises(ValueError):
            parse('F[3,1](R1)')

    def test_reserved_name_as_region(self):
        with pytest.raises(STLSyntaxError):
            parse('U')

    def test_empty_text(self):
        with pytest.raises(STLSyntaxError) as exc:
            parse('')
        assert exc.value.offset == 0

    def test_shipped_specs(self):
        assert load_spec_file(os.path.join(SPEC_DIR, 'phi1.stl')) == parse(PHI1)
        assert load_spec_file(os.path.join(SPEC_DIR, 'phi2.stl')) == parse(PHI2)
        assert load_spec_file(os.path.join(SPEC_DIR, 'phi3.stl')) == parse(PHI3)

    def test_literal_phi1_groups_by_precedence(self):
        literal = load_spec_file(os.path.join(SPEC_DIR, 'phi1_literal.stl'))
        assert isinstance(literal, Or)
        assert literal.left == Finally(Interval(0, 10), Atom('R1'))
        assert literal != parse(PHI1)

    def test_spec_file_without_formula(self, tmp_path):
        path = tmp_path / 'empty.stl'
        path.write_text('# only a comment\n\n')
        with pytest.raises(SpecificationError):
            load_spec_file(str(path))


class TestStructure:
    """Horizon, aggregation width, traversal helpers and transforms"""

    def test_horizon(self):
        assert horizon(parse('F[0,10](R1)')) == 10
        assert horizon(parse(PHI1)) == 30
        assert horizon(parse(PHI2)) == 30
        assert horizon(parse(PHI3)) == 30
        assert horizon(parse('A U[1,4] F[0,2] B')) == 6
        assert horizon(Atom('R1')) == 0

    def test_aggregation_width(self):
        assert aggregation_width(parse('G[0,2](px > 0)')) == 3
        assert aggregation_width(parse('G[0,2](G[0,2](px > 0))')) == 9
        assert aggregation_width(parse('F[0,0](R1)')) == 1
        assert aggregation_width(parse('A & B')) == 2
        assert aggregation_width(parse('A U[0,2] B')) == 3 * 4

    def test_subformulas_pre_order(self):
        f = parse('F[0,1](A & !B)')
        assert subformulas(f) == [f, f.child, Atom('A'), Not(Atom('B')), Atom('B')]

    def test_region_names(self):
        assert region_names(parse(PHI1)) == ('O1', 'R1', 'R2', 'R3')

    def test_swap_regions(self):
        assert swap_regions(parse(PHI3), 'R1', 'R2') == parse('F[0,15](R2 & F[0,15](R1))')

    def test_shift_intervals(self):
        assert shift_intervals(parse('F[0,10](R1)'), 2) == parse('F[2,12](R1)')
        with pytest.raises(SpecificationError):
            shift_intervals(parse('F[1,3](R1)'), -2)

    def test_mission_builders_reproduce_shipped_specs(self):
        phi1 = conjunction(conjunction(reach_choice([('R1', 0, 10), ('R2', 10, 20)]), reach('R3', 20, 30)),
                           avoid('O1', 0, 30))
        assert phi1 == parse(PHI1)
        assert conjunction(stabilize('R1', 15, 10), avoid('O1', 0, 30)) == parse(PHI2)
        assert sequenced_visit('R1', 'R2', 0, 15) == parse(PHI3)

    def test_builders_reject_empty(self):
        with pytest.raises(SpecificationError):
            reach_choice([])
        with pytest.raises(SpecificationError):
            conjunction()

    def test_validate_regions(self):
        env = default_environment()
        validate_regions(parse(PHI1), env)
        with pytest.raises(UnknownRegionError):
            validate_regions(parse('F[0,3](R9)'), env)


class TestSemantics:
    """Boolean and quantitative semantics on hand-computed signals"""

    def test_globally(self):
        f = Globally(Interval(0, 2), px_gt(0))
        assert satisfies(f, px_signal([1, 2, 3]))
        assert robustness(f, px_signal([1, 2, 3])) == 1.0

    def test_finally(self):
        f = Finally(Interval(0, 2), px_gt(4))
        assert not satisfies(f, px_signal([1, 2, 3]))
        assert robustness(f, px_signal([1, 2, 3])) == -1.0

    def test_until(self):
        f = parse('(px > 0) U[0,2] (px > 4)')
        assert satisfies(f, px_signal([1, 2, 5]))
        assert robustness(f, px_signal([1, 2, 5])) == 1.0
        assert not satisfies(f, px_signal([1, -1, 5]))

    def test_atom_value(self):
        assert robustness(px_gt(2), px_signal([5])) == 3.0

    def test_boundary_counts_as_violation(self):
        assert not satisfies(px_gt(2), px_signal([2]))

    def test_evaluation_time_offset(self):
        f = Finally(Interval(0, 1), px_gt(4))
        assert satisfies(f, px_signal([0, 0, 5]), t=1)
        assert not satisfies(f, px_signal([0, 0, 5]), t=0)

    def test_signal_too_short(self):
        with pytest.raises(SignalTooShortError) as exc:
            satisfies(Finally(Interval(0, 5), px_gt(0)), px_signal([1, 2, 3]))
        assert exc.value.required == 6
        assert exc.value.available == 3

    def test_region_atoms(self):
        env = default_environment()
        signal = np.array([[7.0, 7.0, 0.0, 0.0], [5.0, 5.0, 0.0, 0.0]])
        assert robustness(Atom('R1'), signal, 0, env) == 1.0
        assert robustness(Atom('O1', 'outside'), signal, 1, env) == -1.0
        assert not satisfies(parse('G[0,1](!O1)'), signal, 0, env)

    def test_regions_need_environment(self):
        with pytest.raises(SpecificationError):
            robustness(Atom('R1'), px_signal([1.0]))

    def test_traces(self):
        f = Finally(Interval(0, 1), px_gt(2))
        np.testing.assert_array_equal(robustness_trace(f, px_signal([1, 3, 0, 4])), [1.0, 1.0, 2.0])
        np.testing.assert_array_equal(satisfaction_trace(f, px_signal([1, 3, 0, 4])), [True, True, True])

    def test_smooth_width_one_is_exact(self):
        f = parse('F[3,3](px > 1)')
        signal = px_signal([0, 0, 0, 2.5])
        assert smooth_robustness(f, signal, beta=2.0) == robustness(f, signal)

    def test_smooth_globally_within_bound(self):
        f = Globally(Interval(0, 2), px_gt(0))
        value = smooth_robustness(f, px_signal([1, 2, 3]), beta=10.0)
        assert abs(value - 1.0) <= math.log(3) / 10

    def test_smooth_large_beta_limit(self):
        f = Finally(Interval(0, 2), px_gt(4))
        assert abs(smooth_robustness(f, px_signal([1, 2, 3]), beta=1000.0) + 1.0) < 1e-3

    def test_smooth_rejects_non_positive_beta(self):
        with pytest.raises(SpecificationError):
            smooth_robustness(px_gt(0), px_signal([1.0]), beta=0.0)

    def test_smooth_atoms_are_exact(self):
        env = default_environment()
        signal = np.array([[6.5, 7.5, 0.0, 0.0]])
        assert smooth_robustness(Atom('R1'), signal, 0, env, beta=1.0) == robustness(Atom('R1'), signal, 0, env)

    def test_smooth_tensor_gradient(self):
        f = parse('F[0,3](R1) & G[0,3](!O1)')
        env = default_environment()
        rng = np.random.default_rng(5)
        states = de.parameter(np.column_stack([rng.uniform(4.5, 8.5, 4), rng.uniform(4.5, 8.5, 4),
                                               np.zeros(4), np.zeros(4)]))
        assert de.grad_check(lambda s: smooth_robustness_tensor(f, s, env, 1.0), states) < 1e-6


class TestRandomizedSemantics:
    """Properties over randomized formulas (depth <= 4) and signals (length <= 41)"""

    def setup_method(self):
        self.env = default_environment()

    @settings(max_examples=300, deadline=None)
    @given(formula_and_signal())
    def test_sign_consistency(self, case):
        f, signal = case
        rho = robustness(f, signal, 0, self.env)
        if abs(rho) > 1e-9:
            assert (rho > 0) == satisfies(f, signal, 0, self.env)

    @settings(max_examples=150, deadline=None)
    @given(formula_and_signal(), st.sampled_from([2.0, 10.0, 50.0]))
    def test_smooth_bound(self, case, beta):
        f, signal = case
        exact = robustness(f, signal, 0, self.env)
        smooth = smooth_robustness(f, signal, 0, self.env, beta)
        assert abs(smooth - exact) <= math.log(aggregation_width(f)) / beta + 1e-9

    @settings(max_examples=200, deadline=None)
    @given(formula_and_signal())
    def test_negation_duality(self, case):
        f, signal = case
        assert robustness(Not(f), signal, 0, self.env) == -robustness(f, signal, 0, self.env)

    @settings(max_examples=200, deadline=None)
    @given(formula_and_signal(), intervals())
    def test_finally_globally_duality(self, case, interval):
        f, _ = case
        length = horizon(f) + interval.hi + 1
        rng = np.random.default_rng(length)
        signal = np.column_stack([rng.uniform(0, 10, length), rng.uniform(0, 10, length),
                                  rng.uniform(-2, 2, length), rng.uniform(-2, 2, length)])
        lhs = satisfies(Finally(interval, f), signal, 0, self.env)
        rhs = satisfies(Not(Globally(interval, Not(f))), signal, 0, self.env)
        assert lhs == rhs

    @settings(max_examples=300, deadline=None)
    @given(formulas())
    def test_round_trip(self, f):
        assert parse_tokens(linearize(f, 'in_order', 'symbol')) == f
        assert parse(render_canonical(f)) == f

    @settings(max_examples=200, deadline=None)
    @given(formulas())
    def test_horizon_monotonicity(self, f):
        for node in subformulas(f):
            bound = node.interval.hi if hasattr(node, 'interval') else 0
            for child in (getattr(node, name) for name in ('child', 'left', 'right') if hasattr(node, name)):
                assert horizon(child) + bound <= horizon(node)


class TestLinearize:
    """Token streams and the vocabulary"""

    def test_in_order_symbol(self):
        assert linearize(parse('F[0,10](R1)')) == ['F', '[', '0', ',', '10', ']', '(', 'R1', ')']

    def test_pre_order_word(self):
        assert linearize(parse('F[0,10](R1)'), 'pre_order', 'word') == ['finally', '0', '10', 'R1']

    def test_post_order(self):
        assert linearize(parse('A & ~B'), 'post_order') == ['A', '~', 'B', '&']

    def test_phi1_golden(self, golden_path):
        with open(golden_path('phi1_tokens.txt'), 'r', encoding='utf-8') as f:
            expected = [line.rstrip('\n') for line in f if line.strip()]
        assert linearize(parse(PHI1)) == expected

    def test_round_trip_phi3(self):
        assert parse_tokens(linearize(parse(PHI3))) == parse(PHI3)

    def test_bound_above_h_max(self):
        with pytest.raises(VocabularyError):
            linearize(parse('F[0,40](R1)'), h_max=32)

    def test_unknown_style(self):
        with pytest.raises(ValueError):
            linearize(parse('R1'), 'level_order')

    def test_vocabulary_encode_decode(self):
        vocab = Vocabulary(['R3', 'R2', 'R1', 'O1'], h_max=32)
        tokens = linearize(parse(PHI1))
        assert vocab.decode(vocab.encode(tokens)) == tokens
        assert vocab.regions == ('O1', 'R1', 'R2', 'R3')
        assert 'finally' in vocab and '32' in vocab and '33' not in vocab

    def test_vocabulary_rejects_unknown_token(self):
        with pytest.raises(VocabularyError):
            Vocabulary(['R1']).encode(['R7'])

    def test_vocabulary_serialization(self):
        vocab = Vocabulary.for_environment(default_environment(), h_max=16)
        assert Vocabulary.from_dict(vocab.to_dict()) == vocab
        assert len(vocab) == 12 + 7 + 17 + 4
