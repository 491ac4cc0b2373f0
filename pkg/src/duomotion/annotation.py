"""Contact annotation toolchain: derive, prompt, parse, encode, serve.

Joint-joint contact pairs follow the fixed wire format
``{JOINT, JOINT, BEGIN, END}`` where the first joint belongs to person 1 and
the second to person 2, with a 19-name joint vocabulary.  Captions are two
lines, ``text 1:`` and ``text 2:``, one per person.

``annotate_via_service`` posts a chat-completion-shaped request (messages in,
choices out) to a configured endpoint, or answers from deterministic canned
fixtures in stub mode.
"""

from __future__ import annotations

import os
import re
import time
from dataclasses import dataclass, field
from hashlib import sha256
from pathlib import Path

import numpy as np
import requests

from .body import NUM_JOINTS, load_default_tree
from .fileio import check_schema, read_json, write_json

TEXT_DIM = 256
ANNOTATION_SCHEMA_VERSION = 1


class AnnotationParseError(ValueError):
    pass


class UnknownJointError(AnnotationParseError):
    pass


class InvalidSpanError(AnnotationParseError):
    pass


class MalformedPairError(AnnotationParseError):
    pass


class MissingCaptionError(AnnotationParseError):
    pass


class AnnotationServiceError(RuntimeError):
    def __init__(self, message, raw_text=None):
        super().__init__(message)
        self.raw_text = raw_text


class ServiceTimeoutError(AnnotationServiceError):
    pass


class ServiceStatusError(AnnotationServiceError):
    pass


class ServiceEnvelopeError(AnnotationServiceError):
    pass


def vocabulary() -> tuple:
    return load_default_tree().prompt_vocabulary


@dataclass(frozen=True)
class ContactPair:
    joint_a: str     # person 1's joint
    joint_b: str     # person 2's joint
    begin: int
    end: int

    def __post_init__(self):
        vocab = vocabulary()
        for name in (self.joint_a, self.joint_b):
            if name not in vocab:
                raise UnknownJointError(f"unknown joint name: {name!r}")
        if not isinstance(self.begin, int) or not isinstance(self.end, int):
            raise MalformedPairError("time steps must be integers")
        if self.begin < 0 or self.begin > self.end:
            raise InvalidSpanError(
                f"invalid span: begin={self.begin}, end={self.end}")

    def render(self) -> str:
        return f"{{{self.joint_a}, {self.joint_b}, {self.begin}, {self.end}}}"


@dataclass
class InteractionCaption:
    text_1: str
    text_2: str
    pairs: list

    def __post_init__(self):
        if self.pairs and not (self.text_1.strip() and self.text_2.strip()):
            raise MissingCaptionError("captions must be non-empty when pairs exist")


# -- deriving contacts from geometry ---------------------------------------------


def derive_contacts(joints_a: np.ndarray, joints_b: np.ndarray,
                    threshold: float = 0.10) -> list:
    """Contact pairs from per-frame joint distances.

    joints_*: (L, 24, 3).  For each vocabulary joint pair, every maximal run
    of frames with Euclidean distance < threshold becomes one ContactPair.
    Output is ordered by (person-1 joint index, person-2 joint index, begin).
    """
    joints_a = np.asarray(joints_a, dtype=np.float64)
    joints_b = np.asarray(joints_b, dtype=np.float64)
    if joints_a.shape != joints_b.shape or joints_a.shape[1:] != (NUM_JOINTS, 3):
        raise ValueError("joint arrays must both be (L, 24, 3)")
    tree = load_default_tree()
    vocab = tree.prompt_vocabulary
    idx = np.array([tree.joint_index(n) for n in vocab])

    pa = joints_a[:, idx]                       # (L, 19, 3)
    pb = joints_b[:, idx]
    dist = np.linalg.norm(pa[:, :, None, :] - pb[:, None, :, :], axis=-1)  # (L,19,19)
    below = dist < threshold

    pairs = []
    for i, name_a in enumerate(vocab):
        for j, name_b in enumerate(vocab):
            col = below[:, i, j]
            if not col.any():
                continue
            # maximal consecutive runs
            padded = np.diff(np.concatenate([[0], col.view(np.int8), [0]]))
            starts = np.flatnonzero(padded == 1)
            ends = np.flatnonzero(padded == -1) - 1
            for s, e in zip(starts, ends):
                pairs.append(ContactPair(name_a, name_b, int(s), int(e)))
    return pairs


# -- prompt ------------------------------------------------------------------------


_EXAMPLE_SENTENCES = (
    "Text 1: a person dance with others holding his left hand with the other's "
    "right hand, putting his right hand on the other's waist, and his shoulder "
    "being touched.",
    "Text 2: a person dance with other holding her right hand with the other's "
    "left hand, with her waist being embraced, placing her left hand on the "
    "other's shoulder.",
)

_EXAMPLE_PAIRS = (
    "{left_wrist, right_wrist, 11, 15}",
    "{right_wrist, left_hip, 14, 15}",
    "{right_shoulder, left_wrist, 9, 15}",
)


def build_prompt(clip_id: str = "", frames: int = 16) -> str:
    """The annotator instruction document; byte-stable for identical inputs."""
    vocab = ", ".join(f"`{n}'" for n in vocabulary())
    lines = [
        "Given the image sequence of two human interaction, generate 0, 1 or "
        "more joint-joint contact pair(s) according to the following background "
        "information, rules, and examples. Joint-joint contact pair should "
        "exactly reflect the human interaction shown in the image sequence.",
        "",
        "[Start of background Information]",
        f"Human has JOINTS: [{vocab}].",
        f"The image sequence has {frames} frames, numbered 0 to {frames - 1}."
        + (f" The clip identifier is {clip_id}." if clip_id else ""),
        "[End of background Information]",
        "",
        "[Start of rules]",
        "1.Each joint-joint pair should be formatted into {JOINT, JOINT, "
        "TIME-STEP, TIME-STEP}. JOINT should be replaced by JOINT in the "
        "background information. IMPORTANT: The first JOINT belongs to person 1, "
        "and the second JOINT belongs to person 2. Each joint-joint pair "
        "represents a contact of a joint of person 1 and a joint of person 2. "
        "The first TIME-STEP is the start frame number of contact, and the "
        "second TIME-STEP is the end frame number of contact.",
        "2.Use one sentence to describe what action person 1 do and one sentence "
        "to describe what action person 2 do according to the image sequence. "
        "IMPORTANT: the sentence starts from `text 1:' describing the action of "
        "person 1 from the perspective of person 1 and the sentence starts from "
        "`text 2:' describing the action of person 2 from the perspective of "
        "person 2. Sentences should NOT contain words like `person 1' or "
        "`person 2', use `a person' to refer to himself in the sentence and "
        "`others' to refer to others. IMPORTANT: the sentence should be align "
        "with the joint-joint contact pair. IMPORTANT: the order of person 1 "
        "and person 2 should be the same in different joint-joint contact pair "
        "of the same image sequence.",
        "3.IMPORTANT: Do NOT add explanations for the joint-joint contact pair.",
        "[End of rules]",
        "",
        "[Start of an example]",
        "[Start of sentences]",
        _EXAMPLE_SENTENCES[0],
        _EXAMPLE_SENTENCES[1],
        "[End of sentences]",
        "[Start of joint-joint contact pair(s)]",
        *_EXAMPLE_PAIRS,
        "[End of joint-joint contact pair(s)]",
        "[End of an example]",
    ]
    return "\n".join(lines)


# -- parsing ---------------------------------------------------------------------------


_CAPTION_RE = re.compile(r"^\s*text\s*([12])\s*:\s*(.*)$", re.IGNORECASE)
_PAIR_RE = re.compile(
    r"\{\s*([A-Za-z_]+)\s*,\s*([A-Za-z_]+)\s*,\s*([^,\s}]+)\s*,\s*([^,\s}]+)\s*\}")


def parse_response(text: str, strict: bool = False) -> InteractionCaption:
    """Extract captions and contact pairs from annotator output.

    Lenient mode ignores anything outside the caption/pair productions;
    strict mode raises on unrecognized non-empty lines and missing captions.
    Malformed pairs (unknown joints, bad integers, begin > end) always raise.
    """
    text_1, text_2 = "", ""
    pairs = []
    for line in text.splitlines():
        m = _CAPTION_RE.match(line)
        if m:
            if m.group(1) == "1":
                text_1 = m.group(2).strip()
            else:
                text_2 = m.group(2).strip()
            continue
        matched_pair = False
        for m in _PAIR_RE.finditer(line):
            ja, jb, b_raw, e_raw = m.groups()
            try:
                b, e = int(b_raw), int(e_raw)
            except ValueError:
                # Brace groups whose joints are not vocabulary names are not
                # pair productions (e.g. the {JOINT, JOINT, ...} template) and
                # fall through to the unknown-content rule.
                if ja in vocabulary() and jb in vocabulary():
                    raise MalformedPairError(
                        f"non-integer time step in pair: {m.group(0)!r}") from None
                continue
            pairs.append(ContactPair(ja, jb, b, e))
            matched_pair = True
        if matched_pair:
            continue
        if strict and line.strip():
            raise AnnotationParseError(f"unrecognized content: {line.strip()!r}")
    if strict and pairs and not (text_1 and text_2):
        raise MissingCaptionError("strict mode requires both captions")
    if pairs and not (text_1 and text_2):
        # lenient fallback keeps the invariant: captions non-empty with pairs
        text_1 = text_1 or "a person interacts with others."
        text_2 = text_2 or "a person interacts with others."
    return InteractionCaption(text_1=text_1, text_2=text_2, pairs=pairs)


def render_caption(caption: InteractionCaption) -> str:
    """Canonical textual form; parse(render(c)) == c."""
    lines = [f"text 1: {caption.text_1}", f"text 2: {caption.text_2}"]
    lines.extend(p.render() for p in caption.pairs)
    return "\n".join(lines)


# -- text encoding -------------------------------------------------------------------


def encode_text(caption: str) -> np.ndarray:
    """Deterministic 256-dim embedding: hashed-token Gaussians, mean-pooled,
    unit-normalized.  The empty caption maps to the zero vector."""
    tokens = [t for t in re.split(r"[^0-9a-z]+", caption.lower()) if t]
    if not tokens:
        return np.zeros(TEXT_DIM)
    acc = np.zeros(TEXT_DIM)
    for tok in tokens:
        seed = int.from_bytes(sha256(tok.encode("utf-8")).digest()[:8], "little")
        acc += np.random.Generator(np.random.PCG64(seed)).standard_normal(TEXT_DIM)
    acc /= len(tokens)
    norm = np.linalg.norm(acc)
    return acc / norm if norm > 0 else acc


# -- contact mask ------------------------------------------------------------------------


@dataclass
class ContactMask:
    """Binary per-person contact weights, joints x frames."""

    person1: np.ndarray   # (24, L)
    person2: np.ndarray   # (24, L)


def pairs_to_mask(pairs, frames: int) -> ContactMask:
    """M[k, l] = 1 iff joint k participates in a pair whose span covers frame l."""
    tree = load_default_tree()
    m1 = np.zeros((NUM_JOINTS, frames))
    m2 = np.zeros((NUM_JOINTS, frames))
    for p in pairs:
        if p.end >= frames:
            raise InvalidSpanError(
                f"pair span [{p.begin}, {p.end}] exceeds clip length {frames}")
        m1[tree.joint_index(p.joint_a), p.begin:p.end + 1] = 1.0
        m2[tree.joint_index(p.joint_b), p.begin:p.end + 1] = 1.0
    return ContactMask(person1=m1, person2=m2)


# -- service client -------------------------------------------------------------------


@dataclass
class ServiceConfig:
    endpoint: str = ""
    model: str = "annotator"
    api_key_env: str = "ANNOTATOR_API_KEY"
    stub: bool = True
    stub_dir: str | None = None
    timeout: float = 10.0
    retries: int = 3
    backoff: float = 0.25


def _stub_response(clip_id: str, stub_dir: str | None) -> str:
    if stub_dir:
        path = Path(stub_dir) / f"{clip_id}.txt"
        if path.exists():
            return path.read_text(encoding="utf-8")
    from importlib import resources
    canned = read_json(resources.files("duomotion.fixtures")
                       .joinpath("annotation_stub.json"))
    check_schema(canned, 1, "annotation stub fixture")
    for prefix, response in sorted(canned["responses"].items()):
        if clip_id.startswith(prefix):
            return response
    return canned["responses"]["default"]


def annotate_via_service(prompt: str, config: ServiceConfig,
                         clip_id: str = "") -> str:
    """Raw assistant text for a prompt, from the live endpoint or the stub."""
    if config.stub:
        return _stub_response(clip_id, config.stub_dir)
    if not config.endpoint:
        raise AnnotationServiceError("no endpoint configured and stub mode off")

    headers = {"Content-Type": "application/json"}
    key = os.environ.get(config.api_key_env, "")
    if key:
        headers["Authorization"] = f"Bearer {key}"
    payload = {
        "model": config.model,
        "messages": [{"role": "user", "content": prompt}],
    }

    last_error = None
    for attempt in range(config.retries):
        if attempt:
            time.sleep(config.backoff * (2 ** (attempt - 1)))
        try:
            resp = requests.post(config.endpoint, json=payload, headers=headers,
                                 timeout=config.timeout)
        except requests.Timeout as exc:
            last_error = ServiceTimeoutError(f"annotation request timed out: {exc}")
            continue
        except requests.RequestException as exc:
            last_error = AnnotationServiceError(f"transport failure: {exc}")
            continue
        if resp.status_code != 200:
            last_error = ServiceStatusError(
                f"annotation service returned HTTP {resp.status_code}",
                raw_text=resp.text)
            continue
        try:
            body = resp.json()
            return body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            last_error = ServiceEnvelopeError(
                f"malformed response envelope: {exc}", raw_text=resp.text)
            continue
    raise last_error


# -- annotation files ----------------------------------------------------------------


def write_annotation(path, clip_id: str, caption: InteractionCaption,
                     config_hash: str = "") -> None:
    doc = {
        "clip_id": clip_id,
        "text_1": caption.text_1,
        "text_2": caption.text_2,
        "pairs": [[p.joint_a, p.joint_b, p.begin, p.end] for p in caption.pairs],
        "schema_version": ANNOTATION_SCHEMA_VERSION,
        "config_hash": config_hash,
    }
    write_json(path, doc)


def read_annotation(path) -> tuple[str, InteractionCaption]:
    doc = read_json(path)
    check_schema(doc, ANNOTATION_SCHEMA_VERSION, "annotation file")
    pairs = [ContactPair(ja, jb, int(b), int(e)) for ja, jb, b, e in doc["pairs"]]
    return doc["clip_id"], InteractionCaption(doc["text_1"], doc["text_2"], pairs)
