"""Synthetic multi-task seq2seq suite over a shared ~40-token vocabulary.

Six tasks: three transductions (copy, reverse, sort) and three
classifications (parity of a marked letter, bucket of the maximum
letter, letter-index sum mod 3). The classification tasks all answer
with the same shared digit tokens, and parity/modsum share a counting
skill, which is what gives the suite measurable transfer structure.

Splits regenerate bit-identically from the suite seed; train/dev/test
/ood draw from disjoint seed streams. Every out-of-domain split uses
sequences ~50% longer than training plus a letter subrange never seen
in any in-domain split.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PAD_ID = 0
EOS_ID = 1
BOS_ID = 2

_SPECIALS = ["<pad>", "<eos>", "<bos>"]
_DIGITS = ["0", "1", "2"]
_PREFIXES = ["copy:", "reverse:", "sort:", "parity:", "maxclass:", "modsum:"]
_LETTERS = [chr(ord("a") + i) for i in range(26)]

TOKENS = _SPECIALS + _DIGITS + _PREFIXES + _LETTERS
DIGIT_BASE = len(_SPECIALS)                      # id of digit "0"
PREFIX_BASE = DIGIT_BASE + len(_DIGITS)          # id of first task prefix
LETTER_BASE = PREFIX_BASE + len(_PREFIXES)       # id of letter "a"
VOCAB_SIZE = len(TOKENS)

N_LETTERS = 26
TRAIN_LETTERS = 10            # in-domain letters a..j; k..z appear only OOD
TRAIN_LEN = (3, 6)
OOD_LEN = (5, 9)              # ~1.5x the training lengths
MARKED_LETTER = 0             # parity counts occurrences of "a"
BUCKET_WIDTH = 4              # maxclass buckets: a-d, e-h, i+


def token_to_str(tok_id):
    return TOKENS[tok_id]


def ids_to_str(ids):
    return " ".join(TOKENS[i] for i in ids)


def str_to_ids(text):
    lookup = {s: i for i, s in enumerate(TOKENS)}
    return [lookup[tok] for tok in text.split()]


@dataclass
class Example:
    input_ids: list
    target_ids: list          # always ends with EOS
    task_id: int
    label_id: int | None = None


@dataclass
class TaskSpec:
    name: str
    kind: str                 # "classification" | "transduction"
    train_size: int
    dev_size: int = 64
    test_size: int = 128
    ood_size: int = 128
    prefix_policy: str = "named"   # "named" | "unnamed"


@dataclass
class TaskSuite:
    seed: int
    tasks: list[TaskSpec]
    splits: dict = field(default_factory=dict)   # (task_idx, split) -> [Example]

    @property
    def n_tasks(self):
        return len(self.tasks)

    def examples(self, task_idx, split):
        return self.splits[(task_idx, split)]

    def train_sizes(self):
        return [t.train_size for t in self.tasks]

    def task_index(self, name):
        for i, t in enumerate(self.tasks):
            if t.name == name:
                return i
        raise KeyError(f"no task named {name!r}")


def _letters(rng, n, ood):
    hi = N_LETTERS if ood else TRAIN_LETTERS
    return rng.integers(0, hi, size=n)


def _length(rng, ood):
    lo, hi = OOD_LEN if ood else TRAIN_LEN
    return int(rng.integers(lo, hi + 1))


def _bucket(letter_index):
    return min(letter_index // BUCKET_WIDTH, 2)


def _make_example(task_idx, spec, content, target, label=None):
    inp = list(LETTER_BASE + np.asarray(content, dtype=np.int64))
    if spec.prefix_policy == "named":
        inp = [PREFIX_BASE + task_idx] + inp
    return Example(input_ids=inp, target_ids=target + [EOS_ID], task_id=task_idx, label_id=label)


def _gen_copy(rng, spec, task_idx, n, ood):
    out = []
    for _ in range(n):
        c = _letters(rng, _length(rng, ood), ood)
        t = list(LETTER_BASE + c)
        out.append(_make_example(task_idx, spec, c, t))
    return out


def _gen_reverse(rng, spec, task_idx, n, ood):
    out = []
    for _ in range(n):
        c = _letters(rng, _length(rng, ood), ood)
        t = list(LETTER_BASE + c[::-1])
        out.append(_make_example(task_idx, spec, c, t))
    return out


def _gen_sort(rng, spec, task_idx, n, ood):
    out = []
    for _ in range(n):
        c = _letters(rng, _length(rng, ood), ood)
        t = list(LETTER_BASE + np.sort(c))
        out.append(_make_example(task_idx, spec, c, t))
    return out


def _gen_parity(rng, spec, task_idx, n, ood):
    """Count of the marked letter mod 2; the marked count is sampled first
    so both labels appear equally often."""
    out = []
    for _ in range(n):
        length = _length(rng, ood)
        k = int(rng.integers(0, min(length, 4) + 1))
        fill_hi = N_LETTERS if ood else TRAIN_LETTERS
        c = rng.integers(1, fill_hi, size=length)   # fillers exclude the marked letter
        pos = rng.permutation(length)[:k]
        c[pos] = MARKED_LETTER
        label = k % 2
        out.append(_make_example(task_idx, spec, c, [DIGIT_BASE + label], label))
    return out


def _gen_maxclass(rng, spec, task_idx, n, ood):
    """Bucket (0-2) of the maximum letter; the bucket is sampled first."""
    hi = N_LETTERS if ood else TRAIN_LETTERS
    out = []
    for _ in range(n):
        length = _length(rng, ood)
        bucket = int(rng.integers(0, 3))
        lo_b = bucket * BUCKET_WIDTH
        hi_b = min(lo_b + BUCKET_WIDTH, hi) if bucket < 2 else hi
        mx = int(rng.integers(lo_b, hi_b))
        c = rng.integers(0, mx + 1, size=length)
        c[rng.integers(0, length)] = mx
        label = _bucket(mx)
        out.append(_make_example(task_idx, spec, c, [DIGIT_BASE + label], label))
    return out


def _gen_modsum(rng, spec, task_idx, n, ood):
    """Letter-index sum mod 3. In-domain content stays on the first three
    letters (indices 0..2), which keeps the task a counting problem like
    parity; OOD draws from the full range."""
    out = []
    for _ in range(n):
        length = _length(rng, ood)
        c = rng.integers(0, N_LETTERS if ood else 3, size=length)
        label = int(c.sum() % 3)
        out.append(_make_example(task_idx, spec, c, [DIGIT_BASE + label], label))
    return out


_GENERATORS = {
    "copy": (_gen_copy, "transduction"),
    "reverse": (_gen_reverse, "transduction"),
    "sort": (_gen_sort, "transduction"),
    "parity": (_gen_parity, "classification"),
    "maxclass": (_gen_maxclass, "classification"),
    "modsum": (_gen_modsum, "classification"),
}

_DEFAULT_TRAIN_SIZES = {
    "copy": 1000,
    "reverse": 1000,
    "sort": 750,
    "parity": 1250,
    "maxclass": 1000,
    "modsum": 1750,
}

SPLITS = ("train", "dev", "test", "ood")


def build_suite(seed, prefix_policy="named", train_sizes=None, dev_size=64,
                test_size=128, ood_size=128) -> TaskSuite:
    sizes = dict(_DEFAULT_TRAIN_SIZES)
    if train_sizes:
        sizes.update(train_sizes)
    tasks = [
        TaskSpec(name=name, kind=_GENERATORS[name][1], train_size=sizes[name],
                 dev_size=dev_size, test_size=test_size, ood_size=ood_size,
                 prefix_policy=prefix_policy)
        for name in _GENERATORS
    ]
    suite = TaskSuite(seed=seed, tasks=tasks)
    for ti, spec in enumerate(tasks):
        gen = _GENERATORS[spec.name][0]
        for si, split in enumerate(SPLITS):
            n = {"train": spec.train_size, "dev": spec.dev_size,
                 "test": spec.test_size, "ood": spec.ood_size}[split]
            rng = np.random.default_rng(np.random.SeedSequence([seed, ti, si]))
            suite.splits[(ti, split)] = gen(rng, spec, ti, n, ood=(split == "ood"))
    return suite


def metric(task: TaskSpec, predictions, targets):
    """Classification: label accuracy. Transduction: exact-sequence match."""
    if len(predictions) != len(targets):
        raise ValueError(
            f"metric: {len(predictions)} predictions vs {len(targets)} targets"
        )
    if not targets:
        raise ValueError("metric: empty evaluation set")
    hits = 0
    for pred, gold in zip(predictions, targets):
        gold = [t for t in gold if t != EOS_ID]
        if task.kind == "classification":
            hits += bool(pred) and pred[0] == gold[0]
        else:
            hits += list(pred) == gold
    return hits / len(targets)


def dump_examples(path, suite, split="train"):
    """Line format: task<TAB>input tokens<TAB>target tokens."""
    with open(path, "w", encoding="utf-8") as fp:
        for ti, spec in enumerate(suite.tasks):
            for ex in suite.examples(ti, split):
                fp.write(f"{spec.name}\t{ids_to_str(ex.input_ids)}\t{ids_to_str(ex.target_ids)}\n")


def load_examples(path, suite):
    out = []
    with open(path, encoding="utf-8") as fp:
        for line_no, line in enumerate(fp, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{line_no}: expected 3 tab-separated fields")
            name, inp, tgt = parts
            ti = suite.task_index(name)
            target_ids = str_to_ids(tgt)
            label = None
            if suite.tasks[ti].kind == "classification":
                label = target_ids[0] - DIGIT_BASE
            out.append(Example(str_to_ids(inp), target_ids, ti, label))
    return out
