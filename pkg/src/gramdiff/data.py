"""Ground-truth grammar simulator, noise model and dataset file IO.

Grammars load from a small text format, one rule per line:

    A -> a B 0.5

Whitespace-separated; the probability is optional (missing weights count as 1
and each left-hand side is normalized exactly, via rationals, at load). The
start symbol is the left-hand side of the first line. Lines starting with '#'
and blank lines are ignored.

Datasets are JSON Lines, one record per line:

    {"id": 0, "targets": [[1.0, 0.0, 0.0], ...], "labels": [0, ...], "context": [...]}

`labels` (clean per-step terminal indices) and `context` are optional.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import diffcore as dc
from .extraction import Rule

TOY_GRAMMAR_TEXT = """\
A -> a B
B -> b C 0.5
B -> b A 0.5
C -> c A
"""

CYCLE_GRAMMAR_TEXT = """\
A -> a B
B -> b C
C -> c A
"""


class ParseError(ValueError):
    """A grammar or dataset file could not be parsed."""


class GenerationError(RuntimeError):
    """Sampling reached a non-terminal that has no rules."""


@dataclass
class GroundTruthGrammar:
    nonterminals: list
    terminals: list
    start: int
    rules: list
    seed: int = 0

    def rules_for(self, lhs):
        return [r for r in self.rules if r.lhs == lhs]


@dataclass
class SequenceRecord:
    id: object
    targets: np.ndarray            # L x T, values in [0, 1]
    labels: list = None            # clean per-step terminal indices, if known
    context: np.ndarray = None     # optional D-dim row vector


def load_grammar_text(text, seed=0) -> GroundTruthGrammar:
    nts, terms = [], []
    raw = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) not in (4, 5) or parts[1] != "->":
            raise ParseError(f"line {lineno}: expected 'LHS -> terminal RHS [prob]', got {line!r}")
        lhs, term, rhs = parts[0], parts[2], parts[3]
        try:
            weight = Fraction(parts[4]) if len(parts) == 5 else Fraction(1)
        except ValueError as e:
            raise ParseError(f"line {lineno}: bad probability {parts[4]!r}") from e
        for sym, pool in ((lhs, nts), (rhs, nts), (term, terms)):
            if sym not in pool:
                pool.append(sym)
        raw.append((lhs, term, rhs, weight))
    if not raw:
        raise ParseError("grammar has no rules")
    totals = {}
    for lhs, _, _, w in raw:
        totals[lhs] = totals.get(lhs, Fraction(0)) + w
    rules = [Rule(nts.index(lhs), terms.index(t), nts.index(rhs), float(w / totals[lhs]))
             for lhs, t, rhs, w in raw]
    return GroundTruthGrammar(nts, terms, 0, rules, seed=seed)


def load_grammar_file(path, seed=0) -> GroundTruthGrammar:
    with open(path) as f:
        return load_grammar_text(f.read(), seed=seed)


def builtin_grammar(name, seed=0) -> GroundTruthGrammar:
    texts = {"toy": TOY_GRAMMAR_TEXT, "cycle": CYCLE_GRAMMAR_TEXT}
    if name not in texts:
        raise ParseError(f"unknown builtin grammar {name!r}, have {sorted(texts)}")
    return load_grammar_text(texts[name], seed=seed)


def sample_string(g: GroundTruthGrammar, length, rng):
    """Sample `length` terminals; returns (terminal indices, visited
    non-terminals including the final state, so len(states) == length + 1)."""
    if length < 1:
        raise dc.ParameterError(f"length must be >= 1, got {length}")
    labels, states = [], [g.start]
    current = g.start
    for _ in range(length):
        rules = g.rules_for(current)
        if not rules:
            raise GenerationError(f"non-terminal {g.nonterminals[current]!r} has no rules")
        probs = np.array([r.probability for r in rules])
        pick = rules[rng.choice(len(rules), p=probs / probs.sum())]
        labels.append(pick.terminal)
        current = pick.rhs
        states.append(current)
    return labels, states


def to_targets(labels, T, noise="none", strength=0.0, rng=None) -> np.ndarray:
    """Per-step target vectors for a label sequence.

    noise='none' gives exact one-hot rows. noise='logistic' emulates a noisy
    class-probability stream: one-hot logits at +-strength, Gaussian jitter of
    sigma=strength on every entry, squashed by the logistic function and
    clipped to [0, 1]. strength=0 degenerates to exact one-hot.
    """
    labels = list(labels)
    for l in labels:
        if not 0 <= l < T:
            raise dc.ParameterError(f"label {l} out of range for T={T}")
    onehot = np.zeros((len(labels), T))
    onehot[np.arange(len(labels)), labels] = 1.0
    if noise == "none" or strength == 0.0:
        if noise not in ("none", "logistic"):
            raise dc.ParameterError(f"unknown noise kind {noise!r}")
        return onehot
    if noise != "logistic":
        raise dc.ParameterError(f"unknown noise kind {noise!r}")
    if rng is None:
        raise dc.ParameterError("logistic noise needs an rng")
    logits = strength * (2.0 * onehot - 1.0) + rng.normal(0.0, strength, size=onehot.shape)
    return np.clip(dc.sigmoid_values(logits), 0.0, 1.0)


def sample_records(g: GroundTruthGrammar, count, length, seed=None, noise="none",
                   strength=0.0):
    """Sample dataset records; record i draws from its own stream seeded by
    (seed, i), so records are independent of iteration order."""
    if seed is None:
        seed = g.seed
    records = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        labels, _ = sample_string(g, length, rng)
        targets = to_targets(labels, len(g.terminals), noise=noise, strength=strength, rng=rng)
        records.append(SequenceRecord(id=i, targets=targets, labels=labels))
    return records


def builtin_toy_dataset(count, length, seed=0):
    """One-hot records sampled from the three-symbol toy grammar (T=3)."""
    return sample_records(builtin_grammar("toy"), count, length, seed=seed)


def write_dataset(records, path):
    with open(path, "w") as f:
        for rec in records:
            doc = {"id": rec.id, "targets": [[float(x) for x in row] for row in rec.targets]}
            if rec.labels is not None:
                doc["labels"] = [int(l) for l in rec.labels]
            if rec.context is not None:
                doc["context"] = [float(x) for x in np.asarray(rec.context).ravel()]
            f.write(json.dumps(doc) + "\n")


def read_dataset(path):
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                targets = np.array(doc["targets"], dtype=np.float64)
                if targets.ndim != 2:
                    raise ValueError("targets must be a list of equal-length rows")
                rec = SequenceRecord(
                    id=doc["id"],
                    targets=targets,
                    labels=list(doc["labels"]) if "labels" in doc else None,
                    context=np.array(doc["context"], dtype=np.float64).reshape(1, -1)
                    if "context" in doc else None,
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ParseError(f"{path}: line {lineno}: {e}") from e
            records.append(rec)
    return records


# ---------------------------------------------------------------------------
# exact enumeration oracle for forecasting
# ---------------------------------------------------------------------------

def _transition_tensor(g: GroundTruthGrammar):
    """P[a, t, b] = probability that state a emits terminal t and moves to b."""
    n, t = len(g.nonterminals), len(g.terminals)
    P = np.zeros((n, t, n))
    for r in g.rules:
        P[r.lhs, r.terminal, r.rhs] += r.probability
    return P


def state_posterior(g: GroundTruthGrammar, prefix):
    """Exact distribution over the current non-terminal after emitting `prefix`."""
    P = _transition_tensor(g)
    alpha = np.zeros(len(g.nonterminals))
    alpha[g.start] = 1.0
    for t in prefix:
        alpha = alpha @ P[:, t, :]
        total = alpha.sum()
        if total == 0.0:
            raise GenerationError(f"prefix cannot be generated by the grammar at terminal {t}")
        alpha /= total
    return alpha


def bayes_optimal_forecast(g: GroundTruthGrammar, prefix, horizon):
    """Most probable terminal at each future step given the prefix, computed by
    exact enumeration over the automaton (ties break to the lowest index)."""
    P = _transition_tensor(g)
    alpha = state_posterior(g, prefix)
    preds = []
    for _ in range(horizon):
        term_probs = alpha @ P.reshape(len(alpha), -1)
        term_probs = term_probs.reshape(len(g.terminals), len(alpha)).sum(axis=1)
        preds.append(int(np.argmax(term_probs)))
        alpha = np.einsum("a,atb->b", alpha, P)
    return preds
