"""Affordance descriptions: six-element schema, two-step prompting against an
external text-completion service, response parsing, and the structured
encoder that turns a description into the condition vector.
"""

import base64
import hashlib
import json
import logging
import os
import re
import tempfile
import time
import urllib.error
import urllib.request
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

N_TAXONOMY = 28
UNK = "<unk>"
SIZES = ("small", "medium", "large")

# label in the service response -> description field
LABELS = {
    "category": "object_category",
    "shape": "object_shape",
    "size": "object_size",
    "interaction": "interaction",
    "intention": "intention",
    "taxonomy": "grasp_taxonomy",
}
ELEMENTS = tuple(LABELS)
EMBED_DIMS = {"category": 16, "shape": 16, "size": 16, "interaction": 16, "intention": 16, "taxonomy": 32}
COND_DIM = 128

SIZE_SYNONYMS = {
    "small": "small", "tiny": "small", "little": "small", "mini": "small", "miniature": "small",
    "petite": "small", "compact": "small", "small-sized": "small", "very small": "small",
    "medium": "medium", "mid": "medium", "mid-sized": "medium", "medium-sized": "medium",
    "moderate": "medium", "average": "medium", "regular": "medium", "normal": "medium",
    "middle": "medium", "intermediate": "medium",
    "large": "large", "big": "large", "huge": "large", "giant": "large", "bulky": "large",
    "oversized": "large", "massive": "large", "large-sized": "large", "very large": "large",
    "enormous": "large",
}


class CaptionError(RuntimeError):
    pass


class ParseError(CaptionError):
    def __init__(self, label, raw, detail="missing"):
        super().__init__(f"could not parse '{label}' from response ({detail})")
        self.label = label
        self.raw = raw


class ServiceError(CaptionError):
    pass


class ConnectivityError(ServiceError):
    pass


def normalize_token(text):
    return " ".join(str(text).strip().lower().split())


def normalize_size(text):
    tok = normalize_token(text)
    if tok in SIZE_SYNONYMS:
        return SIZE_SYNONYMS[tok]
    for word in tok.replace("-", " ").split():
        if word in SIZE_SYNONYMS:
            return SIZE_SYNONYMS[word]
    raise ValueError(f"unrecognized object size {text!r}")


@dataclass(frozen=True)
class AffordanceDescription:
    object_category: str
    object_shape: str
    object_size: str
    interaction: str
    intention: str
    grasp_taxonomy: int
    summary: str = ""

    def __post_init__(self):
        for name in ("object_category", "object_shape", "object_size", "interaction", "intention"):
            if not str(getattr(self, name)).strip():
                raise ValueError(f"affordance element '{name}' is empty")
        if self.object_size not in SIZES:
            raise ValueError(f"object_size must be one of {SIZES}, got {self.object_size!r}")
        if not (isinstance(self.grasp_taxonomy, (int, np.integer)) and 0 <= self.grasp_taxonomy < N_TAXONOMY):
            raise ValueError(f"grasp_taxonomy must be an integer in [0, {N_TAXONOMY - 1}]")

    def token(self, element):
        value = getattr(self, LABELS[element])
        return str(int(value)) if element == "taxonomy" else normalize_token(value)

    def elements_only(self):
        return replace(self, summary="")

    def to_dict(self):
        d = asdict(self)
        d["grasp_taxonomy"] = int(d["grasp_taxonomy"])
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(
            object_category=d["object_category"], object_shape=d["object_shape"],
            object_size=d["object_size"], interaction=d["interaction"], intention=d["intention"],
            grasp_taxonomy=int(d["grasp_taxonomy"]), summary=d.get("summary", ""),
        )


def render_elements(desc):
    """Labeled-line form that parse_step1_response reads back."""
    return "\n".join(f"{label}: {desc.token(label) if label != 'taxonomy' else desc.grasp_taxonomy}"
                     for label in ELEMENTS)


# --------------------------------------------------------------------------
# prompts and parsing
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ImageRef:
    ref: str
    width: int
    height: int

    def payload(self):
        path = Path(self.ref)
        if path.is_file():
            return base64.b64encode(path.read_bytes()).decode("ascii")
        return None


def _check_box(name, box, image):
    x0, y0, x1, y1 = (float(v) for v in box)
    if not (0 <= x0 < x1 <= image.width and 0 <= y0 < y1 <= image.height):
        raise ValueError(f"{name} box {tuple(box)} is not inside the {image.width}x{image.height} image")
    return x0, y0, x1, y1


STEP1_TEMPLATE = """\
The image "{ref}" ({width}x{height} pixels) shows a hand interacting with an object.
Hand bounding box (x0, y0, x1, y1) in pixels: {hand}
Object bounding box (x0, y0, x1, y1) in pixels: {obj}
Describe the interaction with exactly six lines, each starting with its label:
category: <object category, e.g. mug, disk, sphere>
shape: <object shape, e.g. elongated, flat, cylindrical>
size: <one of small, medium, large>
interaction: <interaction type, e.g. holding, reaching>
intention: <purpose of the interaction, e.g. to lift, to manipulate>
taxonomy: <grasp taxonomy class index from 0 to 27>
Answer with the six lines only."""

STEP2_TEMPLATE = """\
Combine the elements of a hand-object interaction below into one sentence that
describes the affordance and mentions every element.
category: {category}
shape: {shape}
size: {size}
interaction: {interaction}
intention: {intention}
taxonomy: grasp taxonomy class {taxonomy}
Respond with the single sentence only."""


def _fmt_box(box):
    return "(" + ", ".join(f"{v:g}" for v in box) + ")"


def build_step1_prompt(image_ref, hand_box, object_box):
    hand = _check_box("hand", hand_box, image_ref)
    obj = _check_box("object", object_box, image_ref)
    return STEP1_TEMPLATE.format(ref=image_ref.ref, width=image_ref.width, height=image_ref.height,
                                 hand=_fmt_box(hand), obj=_fmt_box(obj))


def build_step2_prompt(elements):
    return STEP2_TEMPLATE.format(
        category=elements.object_category, shape=elements.object_shape, size=elements.object_size,
        interaction=elements.interaction, intention=elements.intention, taxonomy=elements.grasp_taxonomy,
    )


_LINE = re.compile(r"^\s*(?:[-*•]|\d+[.)])?\s*\**([A-Za-z ]+?)\**\s*:\s*(.*)$")


def parse_step1_response(text):
    """Parse labeled lines into a description with an empty summary."""
    found = {}
    for line in str(text).splitlines():
        m = _LINE.match(line)
        if not m:
            continue
        label = normalize_token(m.group(1))
        if label in LABELS and label not in found:
            found[label] = m.group(2).strip()
    for label in ELEMENTS:
        if not found.get(label):
            raise ParseError(label, text)
    try:
        size = normalize_size(found["size"])
    except ValueError:
        raise ParseError("size", text, f"unrecognized value {found['size']!r}") from None
    tax = re.search(r"-?\d+", found["taxonomy"])
    if tax is None or not 0 <= int(tax.group()) < N_TAXONOMY:
        raise ParseError("taxonomy", text, f"not a class index in [0, 27]: {found['taxonomy']!r}")
    return AffordanceDescription(
        object_category=normalize_token(found["category"]),
        object_shape=normalize_token(found["shape"]),
        object_size=size,
        interaction=normalize_token(found["interaction"]),
        intention=normalize_token(found["intention"]),
        grasp_taxonomy=int(tax.group()),
    )


# --------------------------------------------------------------------------
# external text service
# --------------------------------------------------------------------------

def request_key(request):
    blob = json.dumps(request, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def atomic_write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_fixture(fixtures_dir, request, text):
    """Store a canned response for ``request`` (fixtures/<sha256>.json)."""
    path = Path(fixtures_dir) / f"{request_key(request)}.json"
    atomic_write_text(path, json.dumps({"text": text}))
    return path


class TextServiceClient:
    """HTTP JSON client: POST {model, prompt, image?, max_tokens} -> {text}.

    A fixture directory is consulted before the network.  Transient failures
    (connection errors, timeouts, 429/5xx) are retried with exponential backoff.
    """

    def __init__(self, endpoint=None, model="affordance-captioner", api_key_env=None, fixtures_dir=None,
                 max_tokens=256, timeout=30.0, attempts=3, backoff=0.5, record=False, sleep=time.sleep):
        self.endpoint = endpoint
        self.model = model
        self.api_key_env = api_key_env
        self.fixtures_dir = Path(fixtures_dir) if fixtures_dir else None
        self.max_tokens = int(max_tokens)
        self.timeout = timeout
        self.attempts = int(attempts)
        self.backoff = backoff
        self.record = record
        self._sleep = sleep

    def make_request(self, prompt, image=None):
        req = {"model": self.model, "prompt": prompt, "max_tokens": self.max_tokens}
        if image is not None:
            req["image"] = image
        return req

    def complete(self, request):
        key = request_key(request)
        if self.fixtures_dir is not None:
            path = self.fixtures_dir / f"{key}.json"
            if path.exists():
                return json.loads(path.read_text())["text"]
        if not self.endpoint:
            raise ServiceError(f"no fixture for request {key[:12]} and no endpoint configured")
        text = self._post(request)
        if self.record and self.fixtures_dir is not None:
            write_fixture(self.fixtures_dir, request, text)
        return text

    def _post(self, request):
        headers = {"Content-Type": "application/json"}
        if self.api_key_env and os.environ.get(self.api_key_env):
            headers["Authorization"] = f"Bearer {os.environ[self.api_key_env]}"
        body = json.dumps(request).encode("utf-8")
        last = None
        for attempt in range(self.attempts):
            if attempt:
                self._sleep(self.backoff * 2 ** (attempt - 1))
            try:
                req = urllib.request.Request(self.endpoint, data=body, headers=headers, method="POST")
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    payload = json.loads(resp.read().decode("utf-8"))
                if "text" not in payload:
                    raise ServiceError("service response has no 'text' field")
                return str(payload["text"])
            except urllib.error.HTTPError as exc:
                if exc.code != 429 and exc.code < 500:
                    raise ServiceError(f"service returned HTTP {exc.code}") from exc
                last = exc
            except (urllib.error.URLError, TimeoutError, ConnectionError, OSError) as exc:
                last = exc
            log.warning("text service attempt %d/%d failed: %s", attempt + 1, self.attempts, last)
        raise ConnectivityError(f"text service unreachable after {self.attempts} attempts: {last}")


def caption(client, image_ref, hand_box, object_box, gt_taxonomy=None, cache_dir=None):
    """Two-step affordance description.

    Step 1 asks for the six labeled elements; a ground-truth taxonomy, when
    given, replaces the parsed one before step 2 writes the summary.
    """
    prompt1 = build_step1_prompt(image_ref, hand_box, object_box)
    req1 = client.make_request(prompt1, image_ref.payload())
    cache_path = None
    if cache_dir is not None:
        ckey = request_key({"step1": req1, "gt_taxonomy": gt_taxonomy, "fixtures": bool(client.fixtures_dir)})
        cache_path = Path(cache_dir) / f"{ckey}.json"
        if cache_path.exists():
            return AffordanceDescription.from_dict(json.loads(cache_path.read_text()))
    elements = parse_step1_response(client.complete(req1))
    if gt_taxonomy is not None:
        elements = replace(elements, grasp_taxonomy=int(gt_taxonomy))
    summary = client.complete(client.make_request(build_step2_prompt(elements))).strip()
    if not summary:
        raise ParseError("summary", summary, "empty")
    desc = replace(elements, summary=summary)
    if cache_path is not None:
        atomic_write_text(cache_path, json.dumps(desc.to_dict(), sort_keys=True))
    return desc


# --------------------------------------------------------------------------
# vocabulary + structured encoder
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class VocabularyTable:
    tokens: dict  # element -> tuple of tokens; index 0 is <unk>

    def __post_init__(self):
        for el in ELEMENTS:
            toks = self.tokens.get(el)
            if not toks or toks[0] != UNK or len(set(toks)) != len(toks):
                raise ValueError(f"vocabulary for '{el}' must start with {UNK} and be unique")

    @classmethod
    def build(cls, descriptions):
        seen = {el: set() for el in ELEMENTS}
        for d in descriptions:
            for el in ELEMENTS:
                seen[el].add(d.token(el))
        return cls({el: (UNK, *sorted(seen[el], key=_token_sort_key)) for el in ELEMENTS})

    def size(self, element):
        return len(self.tokens[element])

    def index(self, element, token):
        lookup = self.__dict__.get("_lookup")
        if lookup is None:
            lookup = {el: {t: i for i, t in enumerate(toks)} for el, toks in self.tokens.items()}
            object.__setattr__(self, "_lookup", lookup)
        return lookup[element].get(token, 0)

    def indices(self, desc):
        return np.array([self.index(el, desc.token(el)) for el in ELEMENTS], dtype=np.int64)

    def to_dict(self):
        return {el: list(self.tokens[el]) for el in ELEMENTS}

    @classmethod
    def from_dict(cls, d):
        return cls({el: tuple(d[el]) for el in ELEMENTS})


def _token_sort_key(tok):
    return (0, int(tok), "") if tok.isdigit() else (1, 0, tok)


def element_slices():
    out, start = {}, 0
    for el in ELEMENTS:
        out[el] = slice(start, start + EMBED_DIMS[el])
        start += EMBED_DIMS[el]
    return out


def init_embedding_tables(vocab, rng):
    return {el: rng.standard_normal((vocab.size(el), EMBED_DIMS[el])) for el in ELEMENTS}


def encode_indices(indices, tables):
    """(N, 6) token indices -> (N, 128) condition vectors."""
    indices = np.atleast_2d(indices)
    parts = [tables[el][indices[:, i]] for i, el in enumerate(ELEMENTS)]
    used = sum(p.shape[1] for p in parts)
    parts.append(np.zeros((indices.shape[0], COND_DIM - used)))
    return np.concatenate(parts, axis=1)


def encode_description(desc, vocab, tables):
    for el in ELEMENTS:
        if tables[el].shape != (vocab.size(el), EMBED_DIMS[el]):
            raise ValueError(f"embedding table for '{el}' has shape {tables[el].shape}, "
                             f"expected {(vocab.size(el), EMBED_DIMS[el])}")
    return encode_indices(vocab.indices(desc)[None, :], tables)[0]
