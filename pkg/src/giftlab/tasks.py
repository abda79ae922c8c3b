"""Synthetic verifiable tasks, the shared symbol table, and dataset splits.

Generation uses only integer draws from a PCG64 generator, so a
``(spec, sizes, seed)`` triple regenerates the same bytes everywhere.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import DomainError, InfeasibleDatasetError
from .model.base import TokenSequence, Vocabulary

SPECIALS = ("<pad>", "<bos>", "<eos>")
SYMBOLS = SPECIALS + tuple("0123456789") + tuple("+=>,()YN<")
STOI = {s: i for i, s in enumerate(SYMBOLS)}
VOCAB = Vocabulary(size=len(SYMBOLS), pad=0, bos=1, eos=2, symbols=SYMBOLS)

FAMILIES = ("mod-addition", "digit-sort", "parenthesis-balance")
CHAIN_STYLES = ("direct", "with-scratchpad")
SPLITS = ("sft", "rl", "validation")


@dataclass(frozen=True)
class TaskSpec:
    """One task family with its size knobs.

    ``min_len``/``max_len`` count operands for mod-addition, digits for
    digit-sort and brackets for parenthesis-balance.
    """

    family: str = "mod-addition"
    modulus: int = 10
    min_len: int = 2
    max_len: int = 4
    chain_style: str = "direct"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise DomainError(f"unknown task family {self.family!r}")
        if self.chain_style not in CHAIN_STYLES:
            raise DomainError(f"unknown chain style {self.chain_style!r}")
        if not 2 <= self.modulus <= 10:
            raise DomainError("modulus must lie in [2, 10] (single-digit symbols)")
        if not 1 <= self.min_len <= self.max_len:
            raise DomainError("need 1 <= min_len <= max_len")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def alphabet(self) -> int:
        return {"mod-addition": self.modulus, "digit-sort": 10, "parenthesis-balance": 2}[self.family]

    def block_sizes(self) -> list[tuple[int, int]]:
        return [(L, self.alphabet**L) for L in range(self.min_len, self.max_len + 1)]

    @property
    def instance_count(self) -> int:
        return sum(n for _, n in self.block_sizes())

    @property
    def max_response_len(self) -> int:
        """Longest response in tokens, EOS included."""
        L = self.max_len
        if self.chain_style == "direct":
            core = {"mod-addition": 1, "digit-sort": L, "parenthesis-balance": 1}[self.family]
            return core + 1
        core = {
            "mod-addition": 2 * max(L - 2, 0) + 2,
            "digit-sort": 2 * L + 1,
            "parenthesis-balance": L + 2,
        }[self.family]
        return core + 1

    @property
    def max_prompt_len(self) -> int:
        L = self.max_len
        return (2 * L if self.family == "mod-addition" else L + 1)


@dataclass(frozen=True)
class Instance:
    family: str
    prompt_text: str
    response_text: str
    answer_text: str
    seed_index: int

    @property
    def sequence(self) -> TokenSequence:
        return encode(self.prompt_text, self.response_text)


# -- solving -------------------------------------------------------------------------


def _operands(spec: TaskSpec, index: int) -> list[int]:
    for L, n in spec.block_sizes():
        if index < n:
            digits = []
            for _ in range(L):
                index, d = divmod(index, spec.alphabet)
                digits.append(d)
            return digits[::-1]
        index -= n
    raise DomainError("instance index outside the instance space")


def _prompt_from_operands(spec: TaskSpec, ops: list[int]) -> str:
    if spec.family == "mod-addition":
        return "+".join(str(d) for d in ops) + "="
    if spec.family == "digit-sort":
        return "".join(str(d) for d in ops) + "="
    return "".join("()"[d] for d in ops) + "="


def _parse_prompt(spec: TaskSpec, prompt_text: str) -> list[int]:
    if not prompt_text.endswith("="):
        raise DomainError("prompt must end with '='")
    body = prompt_text[:-1]
    if spec.family == "mod-addition":
        parts = body.split("+")
        if not all(len(p) == 1 and p.isdigit() and int(p) < spec.modulus for p in parts):
            raise DomainError(f"malformed addition prompt {prompt_text!r}")
        return [int(p) for p in parts]
    if spec.family == "digit-sort":
        if not body or not body.isdigit():
            raise DomainError(f"malformed sort prompt {prompt_text!r}")
        return [int(c) for c in body]
    if not body or any(c not in "()" for c in body):
        raise DomainError(f"malformed bracket prompt {prompt_text!r}")
    return ["()".index(c) for c in body]


def solve(spec: TaskSpec, prompt_text: str) -> tuple[str, str]:
    """Ground truth ``(response_text, answer_text)`` for a prompt."""
    ops = _parse_prompt(spec, prompt_text)
    if spec.family == "mod-addition":
        sums, acc = [], 0
        for d in ops:
            acc = (acc + d) % spec.modulus
            sums.append(acc)
        answer = str(sums[-1])
        scratch = ",".join(str(s) for s in sums[1:-1])
    elif spec.family == "digit-sort":
        answer = "".join(str(d) for d in sorted(ops))
        # scratchpad copies the input before emitting the sorted answer
        scratch = "".join(str(d) for d in ops)
    else:
        depth, trace, balanced = 0, [], True
        for d in ops:
            depth += 1 if d == 0 else -1
            if depth < 0:
                trace.append("<")
                balanced = False
                break
            trace.append(str(min(depth, 9)))
        balanced = balanced and depth == 0
        answer = "Y" if balanced else "N"
        scratch = "".join(trace)
    if spec.chain_style == "direct":
        return answer, answer
    return scratch + ">" + answer, answer


def answer_segment(spec: TaskSpec, response_text: str) -> str | None:
    if spec.chain_style == "direct":
        return response_text
    if ">" not in response_text:
        return None
    return response_text.rsplit(">", 1)[1]


# -- encoding ------------------------------------------------------------------------


def encode(prompt_text: str, response_text: str | None = None) -> TokenSequence:
    """Encode a text instance. Without ``response_text`` the text splits after the first '='.

    The response always gains a trailing EOS, so an empty response is ``[eos]``.
    """
    if response_text is None:
        cut = prompt_text.find("=")
        if cut < 0:
            raise DomainError("text instance has no '=' separating prompt and response")
        prompt_text, response_text = prompt_text[: cut + 1], prompt_text[cut + 1 :]
    prompt = _encode_symbols(prompt_text, 0)
    response = _encode_symbols(response_text, len(prompt_text))
    return TokenSequence(prompt, response + [VOCAB.eos])


def _encode_symbols(text: str, offset: int) -> list[int]:
    out = []
    for i, ch in enumerate(text):
        if ch not in STOI or ch in SPECIALS:
            raise DomainError(f"unknown symbol {ch!r} at position {offset + i}")
        out.append(STOI[ch])
    return out


def decode_tokens(tokens) -> str:
    """Decode symbol ids; raises on special ids."""
    out = []
    for t in tokens:
        t = int(t)
        if not 0 <= t < VOCAB.size or SYMBOLS[t] in SPECIALS:
            raise DomainError(f"token {t} is not a printable symbol")
        out.append(SYMBOLS[t])
    return "".join(out)


def decode(seq: TokenSequence) -> str:
    """Inverse of :func:`encode` on complete sequences: ``prompt + response`` without EOS."""
    response = list(seq.response)
    if response and response[-1] == VOCAB.eos:
        response = response[:-1]
    return decode_tokens(seq.prompt) + decode_tokens(response)


# -- reward --------------------------------------------------------------------------


def reward(spec: TaskSpec, prompt, response) -> float:
    """1.0 iff the response is complete and its answer segment is correct; never raises."""
    try:
        response = [int(t) for t in response]
        if not response or response[-1] != VOCAB.eos:
            return 0.0
        prompt_text = decode_tokens(prompt)
        got = answer_segment(spec, decode_tokens(response[:-1]))
        if got is None:
            return 0.0
        return 1.0 if got == solve(spec, prompt_text)[1] else 0.0
    except (DomainError, ValueError, IndexError):
        return 0.0


# -- datasets ------------------------------------------------------------------------


def make_instance(spec: TaskSpec, index: int) -> Instance:
    prompt = _prompt_from_operands(spec, _operands(spec, index))
    response, answer = solve(spec, prompt)
    return Instance(spec.family, prompt, response, answer, int(index))


@dataclass
class DatasetSplits:
    spec: TaskSpec
    sizes: tuple[int, int, int]
    seed: int
    sft: list[Instance] = field(default_factory=list)
    rl: list[Instance] = field(default_factory=list)
    validation: list[Instance] = field(default_factory=list)

    def split(self, name: str) -> list[Instance]:
        return {"sft": self.sft, "rl": self.rl, "validation": self.validation}[name]

    def sequences(self, name: str) -> list[TokenSequence]:
        return [inst.sequence for inst in self.split(name)]

    def prompts(self, name: str) -> list[tuple[int, ...]]:
        return [inst.sequence.prompt for inst in self.split(name)]

    def to_jsonl(self) -> str:
        lines = []
        for name in SPLITS:
            for inst in self.split(name):
                seq = inst.sequence
                lines.append(json.dumps({
                    "split": name,
                    "prompt_tokens": list(seq.prompt),
                    "response_tokens": list(seq.response),
                    "answer_text": inst.answer_text,
                    "family": inst.family,
                    "seed_index": inst.seed_index,
                }, separators=(",", ":")))
        return "\n".join(lines) + "\n"

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_jsonl().encode()).hexdigest()

    def manifest(self) -> dict:
        return {"spec": self.spec.to_dict(), "sizes": list(self.sizes), "seed": self.seed,
                "content_hash": self.content_hash()}

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "dataset.jsonl").write_text(self.to_jsonl())
        (directory / "dataset_manifest.json").write_text(json.dumps(self.manifest(), indent=2, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory) -> "DatasetSplits":
        directory = Path(directory)
        man = json.loads((directory / "dataset_manifest.json").read_text())
        text = (directory / "dataset.jsonl").read_text()
        if hashlib.sha256(text.encode()).hexdigest() != man["content_hash"]:
            raise DomainError("dataset content hash does not match its manifest")
        spec = TaskSpec(**man["spec"])
        out = cls(spec, tuple(man["sizes"]), man["seed"])
        for line in text.splitlines():
            row = json.loads(line)
            seq = TokenSequence(row["prompt_tokens"], row["response_tokens"])
            text_form = decode(seq)
            cut = text_form.index("=") + 1
            out.split(row["split"]).append(Instance(
                row["family"], text_form[:cut], text_form[cut:], row["answer_text"], row["seed_index"]))
        return out


def generate_dataset(spec: TaskSpec, sizes=(2000, 2000, 200), seed: int = 0, exclude=()) -> DatasetSplits:
    """Draw disjoint sft / rl / validation splits without replacement.

    ``exclude`` is an optional set of instance indices that must not appear.
    """
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) != 3 or min(sizes) < 0:
        raise DomainError("sizes must be three non-negative integers")
    total = sum(sizes)
    exclude = set(int(i) for i in exclude)
    available = spec.instance_count - len(exclude)
    if total > available:
        raise InfeasibleDatasetError(
            f"requested {total} instances but the {spec.family} space holds only {available}; "
            f"max feasible total is {available}", available)
    rng = np.random.default_rng(seed)
    picked: list[int] = []
    seen: set[int] = set()
    while len(picked) < total:
        need = total - len(picked)
        draw = rng.choice(spec.instance_count, size=min(spec.instance_count, need + len(exclude)),
                          replace=False)
        for i in draw.tolist():
            if i not in exclude and i not in seen:
                seen.add(i)
                picked.append(i)
                if len(picked) == total:
                    break
    out = DatasetSplits(spec, sizes, seed)
    bounds = np.cumsum((0,) + sizes)
    for name, lo, hi in zip(SPLITS, bounds[:-1], bounds[1:]):
        out.split(name).extend(make_instance(spec, i) for i in picked[lo:hi])
    prompt_sets = [set(inst.prompt_text for inst in out.split(n)) for n in SPLITS]
    for a in range(3):
        for b in range(a + 1, 3):
            if prompt_sets[a] & prompt_sets[b]:
                raise DomainError("split prompts overlap")
    return out


def corrupt_response(spec: TaskSpec, inst: Instance, rng) -> str:
    """A plausible but wrong response, used to give the pre-trained base soft priors."""
    if spec.family == "mod-addition":
        wrong = str((int(inst.answer_text) + int(rng.integers(1, spec.modulus))) % spec.modulus)
    elif spec.family == "digit-sort":
        digits = list(inst.answer_text)
        i, j = rng.integers(len(digits)), rng.integers(len(digits))
        digits[i], digits[j] = digits[j], digits[i]
        wrong = "".join(digits) if digits != list(inst.answer_text) else inst.answer_text[::-1]
    else:
        wrong = "N" if inst.answer_text == "Y" else "Y"
    if spec.chain_style == "direct":
        return wrong
    return inst.response_text.rsplit(">", 1)[0] + ">" + wrong


def pretraining_corpus(specs, size: int, seed: int, noise_permille: int = 500,
                       exclude: dict | None = None) -> list[TokenSequence]:
    """Mixed-family corpus with a share of wrong answers (``noise_permille`` per thousand).

    ``exclude`` maps a family spec to instance indices held out for fine-tuning
    and evaluation.
    """
    rng = np.random.default_rng(seed)
    specs = list(specs)
    exclude = exclude or {}
    out = []
    while len(out) < size:
        spec = specs[int(rng.integers(len(specs)))]
        idx = int(rng.integers(spec.instance_count))
        if idx in exclude.get(spec, ()):
            continue
        inst = make_instance(spec, idx)
        response = inst.response_text
        if int(rng.integers(1000)) < noise_permille:
            response = corrupt_response(spec, inst, rng)
        out.append(encode(inst.prompt_text, response))
    return out
