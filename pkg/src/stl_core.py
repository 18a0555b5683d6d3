"""
Signal Temporal Logic: grammar, AST, horizon, semantics and linearization.

Grammar (loosest binding first, binary operators left-associative):

    formula := disj ( 'U' interval disj )*
    disj    := conj ( '|' conj )*
    conj    := unary ( '&' unary )*
    unary   := '!' unary | ('F' | 'G') interval unary | primary
    primary := '(' formula ')' | '~' REGION | REGION | predicate
    interval:= '[' INT ',' INT ']'

A bare region name is the "inside" atom and ``~R`` the "outside" atom.
Predicates are affine in the state variables, e.g. ``2*px - vy > 1.5``.

Time is discrete with unit step; semantics are evaluated as whole traces with
numpy so each subformula is visited once per signal.
"""

import logging
import re
from dataclasses import dataclass
from functools import reduce
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

import diff_engine as de
from errors import (IntervalError, SignalTooShortError, SpecificationError, STLSyntaxError,
                    UnknownOperatorError, VocabularyError)
from planar_env import EnvironmentSpec, POLARITIES, RESERVED_NAMES, region_margins

logger = logging.getLogger(__name__)

DEFAULT_H_MAX = 32
STATE_VARIABLES = ('px', 'py', 'vx', 'vy')
TRAVERSALS = ('in_order', 'pre_order', 'post_order')
WORD_FORMS = ('symbol', 'word')


# AST

@dataclass(frozen=True)
class Interval:
    lo: int
    hi: int

    def __post_init__(self):
        for bound in (self.lo, self.hi):
            if isinstance(bound, bool) or not isinstance(bound, (int, np.integer)):
                raise SpecificationError(f"interval bounds must be integers, got [{self.lo},{self.hi}]")
        if self.lo < 0 or self.hi < self.lo:
            raise SpecificationError(f"interval must satisfy 0 <= lo <= hi, got [{self.lo},{self.hi}]")
        object.__setattr__(self, 'lo', int(self.lo))
        object.__setattr__(self, 'hi', int(self.hi))

    @property
    def width(self) -> int:
        return self.hi - self.lo + 1

    def __str__(self) -> str:
        return f"[{self.lo},{self.hi}]"


@dataclass(frozen=True)
class Atom:
    """Membership of the position in a named region (or its complement)"""

    region: str
    polarity: str = 'inside'

    def __post_init__(self):
        if self.polarity not in POLARITIES:
            raise SpecificationError(f"polarity must be one of {POLARITIES}, got {self.polarity!r}")


@dataclass(frozen=True)
class Predicate:
    """Affine predicate weights . s + offset > 0 over (px, py, vx, vy)"""

    weights: Tuple[float, float, float, float]
    offset: float = 0.0

    def __post_init__(self):
        weights = tuple(float(w) + 0.0 for w in self.weights)
        if len(weights) != len(STATE_VARIABLES):
            raise SpecificationError(f"predicate needs {len(STATE_VARIABLES)} weights, got {len(weights)}")
        if not any(weights):
            raise SpecificationError("predicate has no state variable")
        object.__setattr__(self, 'weights', weights)
        object.__setattr__(self, 'offset', float(self.offset) + 0.0)

    @property
    def text(self) -> str:
        return _render_predicate(self)


@dataclass(frozen=True)
class Not:
    child: 'Formula'


@dataclass(frozen=True)
class And:
    left: 'Formula'
    right: 'Formula'


@dataclass(frozen=True)
class Or:
    left: 'Formula'
    right: 'Formula'


@dataclass(frozen=True)
class Finally:
    interval: Interval
    child: 'Formula'


@dataclass(frozen=True)
class Globally:
    interval: Interval
    child: 'Formula'


@dataclass(frozen=True)
class Until:
    interval: Interval
    left: 'Formula'
    right: 'Formula'


Formula = Union[Atom, Predicate, Not, And, Or, Finally, Globally, Until]
_LEAVES = (Atom, Predicate)
_BINARY = (And, Or, Until)
_TEMPORAL = (Finally, Globally)


def children(f: Formula) -> Tuple[Formula, ...]:
    if isinstance(f, _LEAVES):
        return ()
    if isinstance(f, (Not, Finally, Globally)):
        return (f.child,)
    return (f.left, f.right)


def subformulas(f: Formula) -> List[Formula]:
    """All subformulas in pre-order, f first"""
    out = []
    stack = [f]
    while stack:
        node = stack.pop()
        out.append(node)
        stack.extend(reversed(children(node)))
    return out


def region_names(f: Formula) -> Tuple[str, ...]:
    return tuple(sorted({node.region for node in subformulas(f) if isinstance(node, Atom)}))


def horizon(f: Formula) -> int:
    """Number of steps beyond t the formula inspects"""
    if isinstance(f, _LEAVES):
        return 0
    if isinstance(f, Not):
        return horizon(f.child)
    if isinstance(f, (And, Or)):
        return max(horizon(f.left), horizon(f.right))
    if isinstance(f, _TEMPORAL):
        return f.interval.hi + horizon(f.child)
    return f.interval.hi + max(horizon(f.left), horizon(f.right))


def aggregation_width(f: Formula) -> int:
    """
    Largest product of aggregation widths along a root-to-leaf path.

    log(aggregation_width(f)) / beta bounds the gap between smooth and exact
    robustness, because each smoothed min/max over k terms adds at most
    log(k) / beta to the error of its inputs.
    """
    if isinstance(f, _LEAVES):
        return 1
    if isinstance(f, Not):
        return aggregation_width(f.child)
    if isinstance(f, (And, Or)):
        return 2 * max(aggregation_width(f.left), aggregation_width(f.right))
    if isinstance(f, _TEMPORAL):
        return f.interval.width * aggregation_width(f.child)
    inner = max(aggregation_width(f.left), aggregation_width(f.right))
    return f.interval.width * (f.interval.hi + 2) * inner


def _map_formula(f: Formula, leaf_fn, interval_fn) -> Formula:
    if isinstance(f, _LEAVES):
        return leaf_fn(f)
    if isinstance(f, Not):
        return Not(_map_formula(f.child, leaf_fn, interval_fn))
    if isinstance(f, And):
        return And(_map_formula(f.left, leaf_fn, interval_fn), _map_formula(f.right, leaf_fn, interval_fn))
    if isinstance(f, Or):
        return Or(_map_formula(f.left, leaf_fn, interval_fn), _map_formula(f.right, leaf_fn, interval_fn))
    if isinstance(f, Finally):
        return Finally(interval_fn(f.interval), _map_formula(f.child, leaf_fn, interval_fn))
    if isinstance(f, Globally):
        return Globally(interval_fn(f.interval), _map_formula(f.child, leaf_fn, interval_fn))
    return Until(interval_fn(f.interval), _map_formula(f.left, leaf_fn, interval_fn),
                 _map_formula(f.right, leaf_fn, interval_fn))


def swap_regions(f: Formula, first: str, second: str) -> Formula:
    """Exchange every occurrence of two region names"""
    swap = {first: second, second: first}

    def leaf(node):
        if isinstance(node, Atom) and node.region in swap:
            return Atom(swap[node.region], node.polarity)
        return node

    return _map_formula(f, leaf, lambda interval: interval)


def shift_intervals(f: Formula, delta: int) -> Formula:
    """Move every interval by delta steps (both bounds)"""
    def shifted(interval):
        if interval.lo + delta < 0:
            raise SpecificationError(f"shifting {interval} by {delta} makes it negative")
        return Interval(interval.lo + delta, interval.hi + delta)

    return _map_formula(f, lambda node: node, shifted)


# mission patterns

def reach(region: str, a: int, b: int) -> Formula:
    return Finally(Interval(a, b), Atom(region))


def avoid(obstacle: str, a: int, b: int) -> Formula:
    return Globally(Interval(a, b), Not(Atom(obstacle)))


def stabilize(region: str, reach_by: int, hold: int) -> Formula:
    """Reach the region by reach_by and stay there for hold further steps"""
    return Finally(Interval(0, reach_by), Globally(Interval(0, hold), Atom(region)))


def sequenced_visit(first: str, second: str, a: int, b: int) -> Formula:
    """Visit first, then second, each within [a, b] of the previous event"""
    return Finally(Interval(a, b), And(Atom(first), Finally(Interval(a, b), Atom(second))))


def reach_choice(options: Sequence[Tuple[str, int, int]]) -> Formula:
    """Disjunction of timed reaches (multi reach choice)"""
    if not options:
        raise SpecificationError("reach_choice needs at least one option")
    return reduce(Or, [reach(region, a, b) for region, a, b in options])


def conjunction(*formulas: Formula) -> Formula:
    if not formulas:
        raise SpecificationError("conjunction needs at least one formula")
    return reduce(And, formulas)


# lexer and parser

class _Token(NamedTuple):
    kind: str      # 'ident', 'number', 'op', 'end'
    value: str
    offset: int


_TOKEN_PATTERN = re.compile(
    r'(?:(?P<number>\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)|(?P<op>[!&|~()\[\],*+\-<>]))')


def _lex(text: str) -> List[_Token]:
    raw = text.encode('utf-8')
    tokens = []
    pos = 0
    while True:
        while pos < len(text) and text[pos].isspace():
            pos += 1
        if pos >= len(text):
            break
        match = _TOKEN_PATTERN.match(text, pos)
        offset = len(text[:pos].encode('utf-8'))
        if match is None or match.lastgroup is None:
            raise UnknownOperatorError(f"unknown operator {text[pos]!r}", offset)
        tokens.append(_Token(match.lastgroup, match.group(match.lastgroup), offset))
        pos = match.end()
    tokens.append(_Token('end', '', len(raw)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = _lex(text)
        self.pos = 0

    def peek(self, ahead: int = 0) -> _Token:
        return self.tokens[min(self.pos + ahead, len(self.tokens) - 1)]

    def advance(self) -> _Token:
        tok = self.tokens[self.pos]
        self.pos = min(self.pos + 1, len(self.tokens) - 1)
        return tok

    def at(self, value: str) -> bool:
        tok = self.peek()
        return tok.kind in ('op', 'ident') and tok.value == value

    def unexpected(self, expected: str):
        tok = self.peek()
        if tok.kind == 'end':
            return STLSyntaxError(f"expected {expected}, found end of input", tok.offset)
        if tok.kind == 'ident' or (tok.kind == 'op' and tok.value not in '()[],'):
            return UnknownOperatorError(f"unknown operator {tok.value!r}", tok.offset)
        return STLSyntaxError(f"expected {expected}, found {tok.value!r}", tok.offset)

    def expect(self, value: str) -> _Token:
        if not self.at(value):
            tok = self.peek()
            found = 'end of input' if tok.kind == 'end' else repr(tok.value)
            raise STLSyntaxError(f"expected {value!r}, found {found}", tok.offset)
        return self.advance()

    def parse(self) -> Formula:
        f = self.formula()
        if self.peek().kind != 'end':
            if self.at(')'):
                raise STLSyntaxError("unbalanced ')'", self.peek().offset)
            raise self.unexpected('end of input')
        return f

    def formula(self) -> Formula:
        f = self.disjunction()
        while self.at('U'):
            self.advance()
            interval = self.interval()
            f = Until(interval, f, self.disjunction())
        return f

    def disjunction(self) -> Formula:
        f = self.conjunction()
        while self.at('|'):
            self.advance()
            f = Or(f, self.conjunction())
        return f

    def conjunction(self) -> Formula:
        f = self.unary()
        while self.at('&'):
            self.advance()
            f = And(f, self.unary())
        return f

    def unary(self) -> Formula:
        if self.at('!'):
            self.advance()
            return Not(self.unary())
        if (self.at('F') or self.at('G')) and self.peek().kind == 'ident':
            op = self.advance().value
            interval = self.interval()
            child = self.unary()
            return Finally(interval, child) if op == 'F' else Globally(interval, child)
        return self.primary()

    def interval(self) -> Interval:
        open_tok = self.expect('[')
        lo = self.bound()
        self.expect(',')
        hi = self.bound()
        self.expect(']')
        if hi < lo:
            raise IntervalError(f"interval upper bound {hi} is below lower bound {lo}", open_tok.offset)
        return Interval(lo, hi)

    def bound(self) -> int:
        tok = self.peek()
        if tok.kind == 'op' and tok.value == '-':
            raise IntervalError("interval bound must be non-negative", tok.offset)
        if tok.kind != 'number':
            raise IntervalError("interval bound must be an integer", tok.offset)
        if not tok.value.isdigit():
            raise IntervalError(f"interval bound {tok.value!r} is not an integer", tok.offset)
        self.advance()
        return int(tok.value)

    def primary(self) -> Formula:
        tok = self.peek()
        if self.at('('):
            self.advance()
            f = self.formula()
            if not self.at(')'):
                raise self.unexpected("')'")
            self.advance()
            return f
        if self.at('~'):
            self.advance()
            name = self.peek()
            if name.kind != 'ident' or name.value in RESERVED_NAMES:
                raise STLSyntaxError("expected a region name after '~'", name.offset)
            self.advance()
            return Atom(name.value, 'outside')
        if tok.kind == 'number' or (tok.kind == 'op' and tok.value == '-') or \
                (tok.kind == 'ident' and tok.value in STATE_VARIABLES):
            return self.predicate()
        if tok.kind == 'ident':
            if self.peek(1).kind == 'op' and self.peek(1).value == '[':
                raise UnknownOperatorError(f"unknown operator {tok.value!r}", tok.offset)
            if tok.value in RESERVED_NAMES:
                raise STLSyntaxError(f"{tok.value!r} cannot be used as a region name", tok.offset)
            self.advance()
            return Atom(tok.value, 'inside')
        raise self.unexpected('a formula')

    def predicate(self) -> Predicate:
        start = self.peek()
        lhs_w, lhs_c = self.affine()
        if not (self.at('>') or self.at('<')):
            raise STLSyntaxError("expected '>' or '<' in predicate", self.peek().offset)
        op = self.advance().value
        rhs_w, rhs_c = self.affine()
        weights = [l - r for l, r in zip(lhs_w, rhs_w)]
        offset = lhs_c - rhs_c
        if op == '<':
            weights = [-w for w in weights]
            offset = -offset
        if not any(weights):
            raise STLSyntaxError("predicate has no state variable", start.offset)
        return Predicate(tuple(weights), offset)

    def affine(self) -> Tuple[List[float], float]:
        weights = [0.0] * len(STATE_VARIABLES)
        constant = 0.0
        sign = 1.0
        if self.at('-'):
            self.advance()
            sign = -1.0
        while True:
            tok = self.peek()
            if tok.kind == 'number':
                value = float(self.advance().value)
                if self.at('*'):
                    self.advance()
                    var = self.peek()
                    if var.kind != 'ident' or var.value not in STATE_VARIABLES:
                        raise STLSyntaxError("expected a state variable after '*'", var.offset)
                    self.advance()
                    weights[STATE_VARIABLES.index(var.value)] += sign * value
                else:
                    constant += sign * value
            elif tok.kind == 'ident' and tok.value in STATE_VARIABLES:
                self.advance()
                weights[STATE_VARIABLES.index(tok.value)] += sign
            else:
                raise STLSyntaxError("expected a number or state variable", tok.offset)
            if self.at('+'):
                self.advance()
                sign = 1.0
            elif self.at('-'):
                self.advance()
                sign = -1.0
            else:
                return weights, constant


def parse(text: str) -> Formula:
    """
    Parse specification text into a Formula.

    Raises:
        STLSyntaxError: malformed text (message carries the byte offset)
        UnknownOperatorError: operator outside the grammar
        IntervalError: negative, non-integer or reversed interval bounds
    """
    return _Parser(text).parse()


def load_spec_file(path: str) -> Formula:
    """First non-comment line of a UTF-8 spec file; '#' starts a comment line"""
    with open(path, 'r', encoding='utf-8') as f:
        for line in f:
            stripped = line.strip()
            if stripped and not stripped.startswith('#'):
                return parse(stripped)
    raise SpecificationError(f"{path}: no formula found")


# rendering and linearization

def _number(value: float) -> str:
    value = float(value) + 0.0
    if value.is_integer() and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def _render_predicate(p: Predicate) -> str:
    parts = []
    for weight, var in zip(p.weights, STATE_VARIABLES):
        if weight == 0.0:
            continue
        magnitude = abs(weight)
        term = var if magnitude == 1.0 else f"{_number(magnitude)}*{var}"
        if not parts:
            parts.append(term if weight > 0 else f"-{term}")
        else:
            parts.append(f"+ {term}" if weight > 0 else f"- {term}")
    return f"{' '.join(parts)} > {_number(-p.offset)}"


_WORDS = {'F': 'finally', 'G': 'globally', 'U': 'until', '!': 'not', '&': 'and', '|': 'or', '~': 'outside'}


def _operator(f: Formula) -> str:
    return {Not: '!', And: '&', Or: '|', Finally: 'F', Globally: 'G', Until: 'U'}[type(f)]


def _leaf_tokens(f: Formula) -> List[str]:
    if isinstance(f, Predicate):
        return [f.text]
    return [f.region] if f.polarity == 'inside' else ['~', f.region]


def _interval_tokens(interval: Interval) -> List[str]:
    return ['[', str(interval.lo), ',', str(interval.hi), ']']


def _needs_parens(f: Formula) -> bool:
    return isinstance(f, _BINARY) or isinstance(f, Predicate)


def _in_order(f: Formula) -> List[str]:
    if isinstance(f, _LEAVES):
        return _leaf_tokens(f)
    if isinstance(f, Not):
        return ['!'] + _operand(f.child)
    if isinstance(f, _TEMPORAL):
        return [_operator(f)] + _interval_tokens(f.interval) + ['('] + _in_order(f.child) + [')']
    middle = [_operator(f)] + (_interval_tokens(f.interval) if isinstance(f, Until) else [])
    return _operand(f.left) + middle + _operand(f.right)


def _operand(f: Formula) -> List[str]:
    inner = _in_order(f)
    return ['('] + inner + [')'] if _needs_parens(f) else inner


def _prefix(f: Formula, post: bool) -> List[str]:
    if isinstance(f, _LEAVES):
        return _leaf_tokens(f)
    head = [_operator(f)]
    if isinstance(f, (Finally, Globally, Until)):
        head += [str(f.interval.lo), str(f.interval.hi)]
    body = [tok for child in children(f) for tok in _prefix(child, post)]
    return body + head if post else head + body


def render_canonical(f: Formula) -> str:
    """Canonical text; parse(render_canonical(f)) == f"""
    if isinstance(f, _LEAVES):
        return ''.join(_leaf_tokens(f))
    if isinstance(f, Not):
        return '!' + _render_operand(f.child)
    if isinstance(f, _TEMPORAL):
        return f"{_operator(f)}{f.interval}({render_canonical(f.child)})"
    op = f"U{f.interval}" if isinstance(f, Until) else _operator(f)
    return f"{_render_operand(f.left)} {op} {_render_operand(f.right)}"


def _render_operand(f: Formula) -> str:
    text = render_canonical(f)
    return f"({text})" if _needs_parens(f) else text


def linearize(f: Formula, style: str = 'in_order', word_form: str = 'symbol',
              h_max: int = DEFAULT_H_MAX) -> List[str]:
    """
    Deterministic token stream for a formula.

    in_order + symbol is the canonical training form and parses back to f.
    Intervals emit one integer token per bound; pre/post order drop brackets.
    """
    if style not in TRAVERSALS:
        raise ValueError(f"style must be one of {TRAVERSALS}, got {style!r}")
    if word_form not in WORD_FORMS:
        raise ValueError(f"word_form must be one of {WORD_FORMS}, got {word_form!r}")
    for node in subformulas(f):
        interval = getattr(node, 'interval', None)
        if interval is not None and interval.hi > h_max:
            raise VocabularyError(f"interval bound {interval.hi} exceeds H_max {h_max}")
    if style == 'in_order':
        tokens = _in_order(f)
    else:
        tokens = _prefix(f, post=(style == 'post_order'))
    if word_form == 'word':
        tokens = [_WORDS.get(tok, tok) for tok in tokens]
    return tokens


def parse_tokens(tokens: Sequence[str]) -> Formula:
    """Inverse of linearize(f, 'in_order', 'symbol')"""
    return parse(' '.join(tokens))


class Vocabulary:
    """Closed token set: operators (symbol and word forms), brackets, integers 0..h_max, regions"""

    def __init__(self, regions: Sequence[str], h_max: int = DEFAULT_H_MAX):
        self.h_max = int(h_max)
        self.regions = tuple(sorted(set(regions)))
        base = ['F', 'G', 'U', '!', '&', '|', '~', '[', ']', '(', ')', ',']
        words = [_WORDS[k] for k in ('F', 'G', 'U', '!', '&', '|', '~')]
        self.tokens: Tuple[str, ...] = tuple(base + words + [str(i) for i in range(self.h_max + 1)]
                                             + list(self.regions))
        self._ids: Dict[str, int] = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        ids = []
        for tok in tokens:
            if tok not in self._ids:
                raise VocabularyError(f"token {tok!r} is not in the vocabulary")
            ids.append(self._ids[tok])
        return np.asarray(ids, dtype=np.int64)

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.tokens[int(i)] for i in ids]

    def to_dict(self) -> dict:
        return {'h_max': self.h_max, 'regions': list(self.regions)}

    @classmethod
    def from_dict(cls, data: Mapping) -> 'Vocabulary':
        return cls(data['regions'], data['h_max'])

    @classmethod
    def for_environment(cls, env: EnvironmentSpec, h_max: int = DEFAULT_H_MAX) -> 'Vocabulary':
        return cls(env.region_names, h_max)


# semantics

def _as_signal(signal) -> np.ndarray:
    s = np.asarray(signal, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] == 0 or s.shape[1] != len(STATE_VARIABLES):
        raise SpecificationError(f"signal must be a non-empty (T, 4) array, got shape {s.shape}")
    return s


def _leaf_values(f: Formula, s: np.ndarray, env: Optional[EnvironmentSpec]) -> np.ndarray:
    if isinstance(f, Predicate):
        return s @ np.asarray(f.weights) + f.offset
    if env is None:
        raise SpecificationError(f"formula references region {f.region!r} but no environment was given")
    return region_margins(env, f.region, f.polarity, s)


def _trace(f: Formula, s: np.ndarray, env, boolean: bool) -> np.ndarray:
    """Values at t = 0 .. len(s) - 1 - horizon(f)"""
    if isinstance(f, _LEAVES):
        values = _leaf_values(f, s, env)
        return values > 0 if boolean else values
    if isinstance(f, Not):
        child = _trace(f.child, s, env, boolean)
        return ~child if boolean else -child
    if isinstance(f, (And, Or)):
        left = _trace(f.left, s, env, boolean)
        right = _trace(f.right, s, env, boolean)
        n = min(len(left), len(right))
        combine = np.minimum if isinstance(f, And) else np.maximum
        return combine(left[:n], right[:n])
    if isinstance(f, _TEMPORAL):
        child = _trace(f.child, s, env, boolean)
        a, b = f.interval.lo, f.interval.hi
        n = len(child) - b
        windows = np.lib.stride_tricks.sliding_window_view(child, b - a + 1)[a:a + n]
        return windows.max(axis=1) if isinstance(f, Finally) else windows.min(axis=1)
    left = _trace(f.left, s, env, boolean)
    right = _trace(f.right, s, env, boolean)
    a, b = f.interval.lo, f.interval.hi
    m = min(len(left), len(right))
    n = m - b
    running = left[:n].copy()
    best = None
    for k in range(b + 1):
        if k > 0:
            running = np.minimum(running, left[k:k + n])
        if k >= a:
            candidate = np.minimum(right[k:k + n], running)
            best = candidate if best is None else np.maximum(best, candidate)
    return best


def _window(f: Formula, signal, t: int) -> np.ndarray:
    s = _as_signal(signal)
    h = horizon(f)
    if t < 0 or t + h > len(s) - 1:
        raise SignalTooShortError(required=t + h + 1, available=len(s))
    return s[t:t + h + 1]


def robustness_trace(f: Formula, signal, env: Optional[EnvironmentSpec] = None) -> np.ndarray:
    """Robustness at every t for which the signal covers the horizon"""
    s = _as_signal(signal)
    if len(s) < horizon(f) + 1:
        raise SignalTooShortError(required=horizon(f) + 1, available=len(s))
    return _trace(f, s, env, boolean=False)


def satisfaction_trace(f: Formula, signal, env: Optional[EnvironmentSpec] = None) -> np.ndarray:
    s = _as_signal(signal)
    if len(s) < horizon(f) + 1:
        raise SignalTooShortError(required=horizon(f) + 1, available=len(s))
    return _trace(f, s, env, boolean=True)


def satisfies(f: Formula, signal, t: int = 0, env: Optional[EnvironmentSpec] = None) -> bool:
    """Boolean semantics at time t (predicates are strict: mu > 0)"""
    return bool(_trace(f, _window(f, signal, t), env, boolean=True)[0])


def robustness(f: Formula, signal, t: int = 0, env: Optional[EnvironmentSpec] = None) -> float:
    """Quantitative min/max semantics at time t"""
    return float(_trace(f, _window(f, signal, t), env, boolean=False)[0])


# smooth semantics (differentiable)

def _smooth_max(x: de.Tensor, beta: float) -> de.Tensor:
    if x.shape[-1] == 1:
        return de.reshape(x, x.shape[:-1])
    return de.scale(de.logsumexp(de.scale(x, beta), axis=-1), 1.0 / beta)


def _smooth_min(x: de.Tensor, beta: float) -> de.Tensor:
    if x.shape[-1] == 1:
        return de.reshape(x, x.shape[:-1])
    return de.scale(de.logsumexp(de.scale(x, -beta), axis=-1), -1.0 / beta)


def _column(x: de.Tensor) -> de.Tensor:
    return de.reshape(x, (x.shape[0], 1))


def _smooth_leaf(f: Formula, states: de.Tensor, env) -> de.Tensor:
    T = states.shape[0]
    if isinstance(f, Predicate):
        mu = de.matmul(states, de.constant(np.asarray(f.weights).reshape(4, 1)))
        return de.reshape(de.add(mu, de.constant(np.full((T, 1), f.offset))), (T,))
    if env is None:
        raise SpecificationError(f"formula references region {f.region!r} but no environment was given")
    rect = env.region(f.region).rect
    # columns: px - xlo, xhi - px, py - ylo, yhi - py
    select = np.array([[1.0, -1.0, 0.0, 0.0],
                       [0.0, 0.0, 1.0, -1.0],
                       [0.0, 0.0, 0.0, 0.0],
                       [0.0, 0.0, 0.0, 0.0]])
    bias = np.array([-rect.xlo, rect.xhi, -rect.ylo, rect.yhi])
    faces = de.add(de.matmul(states, de.constant(select)), de.constant(np.broadcast_to(bias, (T, 4))))
    margin = de.reduce_min(faces, axis=-1)
    return de.scale(margin, -1.0) if f.polarity == 'outside' else margin


def _smooth_trace(f: Formula, states: de.Tensor, env, beta: float) -> de.Tensor:
    if isinstance(f, _LEAVES):
        return _smooth_leaf(f, states, env)
    if isinstance(f, Not):
        return de.scale(_smooth_trace(f.child, states, env, beta), -1.0)
    if isinstance(f, (And, Or)):
        left = _smooth_trace(f.left, states, env, beta)
        right = _smooth_trace(f.right, states, env, beta)
        n = min(left.shape[0], right.shape[0])
        pair = de.concat([_column(de.slice_axis(left, 0, 0, n)), _column(de.slice_axis(right, 0, 0, n))], axis=1)
        return _smooth_min(pair, beta) if isinstance(f, And) else _smooth_max(pair, beta)
    if isinstance(f, _TEMPORAL):
        child = _smooth_trace(f.child, states, env, beta)
        a, b = f.interval.lo, f.interval.hi
        n = child.shape[0] - b
        idx = np.arange(n)[:, None] + np.arange(a, b + 1)[None, :]
        windows = de.reshape(de.gather(_column(child), idx), (n, b - a + 1))
        return _smooth_max(windows, beta) if isinstance(f, Finally) else _smooth_min(windows, beta)
    left = _column(_smooth_trace(f.left, states, env, beta))
    right = _column(_smooth_trace(f.right, states, env, beta))
    a, b = f.interval.lo, f.interval.hi
    n = min(left.shape[0], right.shape[0]) - b
    base = np.arange(n)[:, None]
    candidates = []
    for k in range(a, b + 1):
        held = de.reshape(de.gather(left, base + np.arange(k + 1)[None, :]), (n, k + 1))
        reached = de.reshape(de.gather(right, base + k), (n, 1))
        candidates.append(_column(_smooth_min(de.concat([held, reached], axis=1), beta)))
    return _smooth_max(de.concat(candidates, axis=1), beta)


def smooth_robustness_tensor(f: Formula, states: de.Tensor, env: Optional[EnvironmentSpec], beta: float) -> de.Tensor:
    """Smoothed robustness at t=0 as a scalar tensor, differentiable in states"""
    if not beta > 0:
        raise SpecificationError(f"beta must be > 0, got {beta}")
    if states.ndim != 2 or states.shape[1] != len(STATE_VARIABLES):
        raise SpecificationError(f"signal must be a (T, 4) tensor, got shape {states.shape}")
    h = horizon(f)
    if states.shape[0] < h + 1:
        raise SignalTooShortError(required=h + 1, available=states.shape[0])
    trace = _smooth_trace(f, de.slice_axis(states, 0, 0, h + 1), env, float(beta))
    return de.reshape(de.slice_axis(trace, 0, 0, 1), ())


def smooth_robustness(f: Formula, signal, t: int = 0, env: Optional[EnvironmentSpec] = None,
                      beta: float = 10.0) -> float:
    """
    Log-sum-exp relaxation of robustness at time t.

    Within log(aggregation_width(f)) / beta of robustness(); atoms stay exact.
    """
    if not beta > 0:
        raise SpecificationError(f"beta must be > 0, got {beta}")
    window = _window(f, signal, t)
    with de.no_grad():
        return smooth_robustness_tensor(f, de.Tensor(window.astype(de.get_default_dtype())), env, beta).item()


def validate_regions(f: Formula, env: EnvironmentSpec) -> None:
    """Raise UnknownRegionError if f names a region env does not define"""
    for name in region_names(f):
        env.region(name)
