"""Connectome inference through text-generation providers.

Builds one region-of-interest prompt per region, queries chat-completion
endpoints repeatedly, parses connection-strength lines plus reasoning text,
and averages the repeats (within provider, then across providers) into a
probabilistic graph with entries in [0, 1]. Every raw response is persisted
to a content-addressed cache before it is parsed, so a warm cache makes the
whole pipeline deterministic and network-free.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import DataError, ParseError, ProviderError
from .graphs import RegionAtlas, WeightedGraph

# The five biological factors the standard prompt asks the provider to weigh.
CANONICAL_FACTORS = (
    "structural connectivity",
    "cortical morphology similarity",
    "microstructural profile covariance",
    "geodesic proximity",
    "functional connectivity",
)

# Two extra factors for the extended prompt; they name knowledge the provider
# may hold that no measured connectome in the database covers.
EXTENDED_FACTORS = CANONICAL_FACTORS + (
    "neurotransmitter density",
    "metabolic correlation",
)

DEFAULT_TEMPLATE_VERSION = "v1"

# Count of HTTP POSTs issued by ``http_transport`` since import; test
# instrumentation for the offline guarantees.
network_call_count = 0

Transport = Callable[[str, dict, dict, float], str]


@dataclass(frozen=True)
class PromptSpec:
    """Everything that determines one region's prompt text."""

    atlas: RegionAtlas
    factors: tuple[str, ...]
    roi: str
    template_version: str = DEFAULT_TEMPLATE_VERSION

    def __post_init__(self):
        if not self.factors:
            raise DataError("factor list must be nonempty")
        if self.roi not in self.atlas:
            raise DataError(f"roi {self.roi!r} is not in the atlas")
        object.__setattr__(self, "factors", tuple(self.factors))


@dataclass(frozen=True)
class ProviderConfig:
    name: str
    endpoint_url: str
    model_name: str
    temperature: float = 0.25
    repeats: int = 3
    timeout: float = 60.0
    max_retries: int = 3

    def __post_init__(self):
        if self.temperature < 0:
            raise DataError("temperature must be nonnegative")
        if self.repeats < 1:
            raise DataError("repeats must be at least 1")
        if self.max_retries < 1:
            raise DataError("max_retries must be at least 1")

    def api_key(self) -> str:
        suffix = re.sub(r"[^A-Za-z0-9]", "_", self.name).upper()
        return os.environ.get(f"LLM_API_KEY_{suffix}") or os.environ.get(
            "LLM_API_KEY", ""
        )


@dataclass(frozen=True)
class ReasoningRecord:
    roi: str
    target: str
    strength: float
    rationale_text: str
    factor_tags: tuple[str, ...]
    provider: str
    timestamp: str


@dataclass(frozen=True)
class ParsedResponse:
    """One repeat's strength row plus whatever reasoning was recoverable."""

    row: np.ndarray
    records: tuple[ReasoningRecord, ...]
    missing: tuple[str, ...]


@dataclass(frozen=True)
class ProbabilisticGraph:
    """Weighted graph with entries in [0, 1] plus query provenance."""

    graph: WeightedGraph
    provenance: tuple[tuple[str, int, str], ...] = ()

    def __post_init__(self):
        if np.any(self.graph.weights > 1.0):
            raise DataError("probabilistic graph entries must lie in [0, 1]")

    @property
    def atlas(self) -> RegionAtlas:
        return self.graph.atlas

    @property
    def weights(self) -> np.ndarray:
        return self.graph.weights


def prompt_hash(spec: PromptSpec) -> str:
    """Stable digest over (template_version, atlas, factors, roi)."""
    payload = json.dumps(
        {
            "template_version": spec.template_version,
            "atlas": [(r.name, r.hemisphere) for r in spec.atlas.regions],
            "factors": list(spec.factors),
            "roi": spec.roi,
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def build_prompt(spec: PromptSpec) -> str:
    """Compose the region-of-interest prompt.

    Five parts, in order: expert-role context, the rating task for tau
    spread, the anatomical naming framework, the factor list, and the exact
    output format (one strength line per target region, then a reasoning
    block).
    """
    atlas = spec.atlas
    targets = [n for n in atlas.names if n != spec.roi]
    factor_lines = "\n".join(
        f"{i}. {name}" for i, name in enumerate(spec.factors, start=1)
    )
    target_lines = "\n".join(f"- {t}" for t in targets)
    return f"""You are an expert neuroanatomist specializing in neurodegenerative disease, with deep knowledge of cortical connectivity and the regional progression of Alzheimer's disease.

Task: tau pathology spreads between brain regions along multiple biological routes. For the region of interest {spec.roi}, rate how strongly tau pathology in {spec.roi} influences each of the other {len(targets)} cortical regions.

Anatomical framework: regions follow the Desikan-Killiany cortical parcellation. Names are prefixed ctx_lh_ for the left hemisphere and ctx_rh_ for the right hemisphere; the remainder of each name is the standard gyral label. The target regions are:
{target_lines}

Weigh the following factors when judging each connection:
{factor_lines}

Output format: first give exactly {len(targets)} lines, one per target region, each of the form
{spec.roi} -> <target region>: <strength>
where <strength> is a number between 0 and 1. Do not include a line for {spec.roi} itself. After the strength lines, write a line containing only
Reasoning:
followed by one line per target region of the form
<target region>: <short justification naming the factors that drove your rating>
"""


_ARROW_LINE = re.compile(r"^\s*(\S+)\s*->\s*(\S+)\s*:\s*(\S+)\s*$")
_REASONING_HEADER = re.compile(r"^\s*reasoning\s*:?\s*$", re.IGNORECASE)
_REASONING_LINE = re.compile(r"^\s*(?:[-*]\s*)?(\S+?)\s*:\s*(.+?)\s*$")


def format_response(
    row: np.ndarray,
    atlas: RegionAtlas,
    roi: str,
    rationales: Mapping[str, str] | None = None,
) -> str:
    """Canonical emitter for the documented line grammar.

    ``parse_response(format_response(row)) == row`` exactly: values are
    written with ``repr`` so they survive the float round trip.
    """
    row = np.asarray(row, dtype=float)
    if row.shape != (atlas.count,):
        raise DataError("row length does not match atlas")
    roi_idx = atlas.index_of(roi)
    lines = [
        f"{roi} -> {name}: {float(row[i])!r}"
        for i, name in enumerate(atlas.names)
        if i != roi_idx
    ]
    if rationales:
        lines.append("Reasoning:")
        lines.extend(
            f"{name}: {rationales[name]}" for name in atlas.names if name in rationales
        )
    return "\n".join(lines) + "\n"


def _factor_tags(text: str) -> tuple[str, ...]:
    low = text.lower()
    return tuple(f for f in EXTENDED_FACTORS if f in low)


def parse_response(
    text: str,
    atlas: RegionAtlas,
    roi: str,
    strict: bool = False,
    provider: str = "",
    timestamp: str = "",
) -> ParsedResponse:
    """Extract the strength row and reasoning records from response text.

    Lines matching ``source -> target: value`` are validated strictly: the
    value must lie in [0, 1] and both region names must exist in the atlas.
    Self-edge lines are ignored; other text is skipped. Targets with no line
    default to strength 0 and are reported in ``missing`` (an error under
    ``strict``).
    """
    if not text:
        raise ParseError("empty response text")
    if roi not in atlas:
        raise DataError(f"roi {roi!r} is not in the atlas")
    d = atlas.count
    roi_idx = atlas.index_of(roi)
    row = np.zeros(d)
    seen: set[int] = set()
    rationales: dict[str, str] = {}
    in_reasoning = False

    for lineno, line in enumerate(text.splitlines(), start=1):
        if _REASONING_HEADER.match(line):
            in_reasoning = True
            continue
        m = _ARROW_LINE.match(line)
        if m:
            source, target, raw_value = m.groups()
            if source not in atlas:
                raise ParseError(f"line {lineno}: unknown region {source!r}")
            if target not in atlas:
                raise ParseError(f"line {lineno}: unknown region {target!r}")
            if source != roi:
                raise ParseError(
                    f"line {lineno}: source {source!r} does not match the "
                    f"queried region {roi!r}"
                )
            try:
                value = float(raw_value)
            except ValueError:
                raise ParseError(
                    f"line {lineno}: unparseable strength {raw_value!r}"
                ) from None
            if not 0.0 <= value <= 1.0:
                raise ParseError(
                    f"line {lineno}: strength {value!r} outside [0, 1]"
                )
            if target == roi:
                continue
            idx = atlas.index_of(target)
            row[idx] = value
            seen.add(idx)
            continue
        if in_reasoning:
            rm = _REASONING_LINE.match(line)
            if rm and rm.group(1) in atlas and rm.group(1) != roi:
                rationales[rm.group(1)] = rm.group(2)

    missing = tuple(
        name
        for i, name in enumerate(atlas.names)
        if i != roi_idx and i not in seen
    )
    if strict and missing:
        raise ParseError(f"missing strength lines for: {', '.join(missing)}")

    records = tuple(
        ReasoningRecord(
            roi=roi,
            target=target,
            strength=float(row[atlas.index_of(target)]),
            rationale_text=rationale,
            factor_tags=_factor_tags(rationale),
            provider=provider,
            timestamp=timestamp,
        )
        for target, rationale in rationales.items()
    )
    return ParsedResponse(row=row, records=records, missing=missing)


# ---------------------------------------------------------------------------
# Cache: one JSON document per (prompt hash, provider, repeat), stored under a
# digest of that key so the directory is content-addressed.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QueryCacheEntry:
    prompt_hash: str
    provider: str
    repeat: int
    raw_text: str
    parsed_row: tuple[float, ...] | None
    created_at: str


class QueryCache:
    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    @staticmethod
    def entry_key(prompt_hash_hex: str, provider: str, repeat: int) -> str:
        tag = f"{prompt_hash_hex}|{provider}|{repeat}"
        return hashlib.sha256(tag.encode("utf-8")).hexdigest()

    def path_for(self, prompt_hash_hex: str, provider: str, repeat: int) -> Path:
        return self.root / f"{self.entry_key(prompt_hash_hex, provider, repeat)}.json"

    def load(
        self, prompt_hash_hex: str, provider: str, repeat: int
    ) -> QueryCacheEntry | None:
        path = self.path_for(prompt_hash_hex, provider, repeat)
        if not path.exists():
            return None
        doc = json.loads(path.read_text(encoding="utf-8"))
        return QueryCacheEntry(
            prompt_hash=doc["prompt_hash"],
            provider=doc["provider"],
            repeat=doc["repeat"],
            raw_text=doc["raw_text"],
            parsed_row=tuple(doc["parsed_row"]) if doc.get("parsed_row") else None,
            created_at=doc["created_at"],
        )

    def store(self, entry: QueryCacheEntry) -> Path:
        path = self.path_for(entry.prompt_hash, entry.provider, entry.repeat)
        doc = {
            "prompt_hash": entry.prompt_hash,
            "provider": entry.provider,
            "repeat": entry.repeat,
            "raw_text": entry.raw_text,
            "parsed_row": list(entry.parsed_row) if entry.parsed_row else None,
            "created_at": entry.created_at,
        }
        with self._lock:
            tmp = path.with_suffix(".tmp")
            tmp.write_text(json.dumps(doc, indent=2), encoding="utf-8")
            os.replace(tmp, path)
        return path


def http_transport(url: str, payload: dict, headers: dict, timeout: float) -> str:
    """POST to a chat-completion endpoint; returns the assistant text."""
    global network_call_count
    network_call_count += 1
    import requests

    try:
        resp = requests.post(url, json=payload, headers=headers, timeout=timeout)
        resp.raise_for_status()
        data = resp.json()
    except Exception as exc:
        raise ProviderError(f"request to {url} failed: {exc}") from exc
    try:
        return data["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise ProviderError(f"malformed completion payload from {url}") from exc


def offline_transport(url: str, payload: dict, headers: dict, timeout: float) -> str:
    raise ProviderError(f"offline mode forbids network access (attempted {url})")


def _call_provider(
    provider: ProviderConfig, prompt: str, transport: Transport
) -> str:
    payload = {
        "model": provider.model_name,
        "temperature": provider.temperature,
        "messages": [{"role": "user", "content": prompt}],
    }
    headers = {"Content-Type": "application/json"}
    key = provider.api_key()
    if key:
        headers["Authorization"] = f"Bearer {key}"
    last: Exception | None = None
    for attempt in range(provider.max_retries):
        try:
            return transport(provider.endpoint_url, payload, headers, provider.timeout)
        except ProviderError as exc:
            last = exc
            if attempt + 1 < provider.max_retries:
                time.sleep(min(2.0, 0.2 * 2**attempt))
    raise ProviderError(
        f"provider {provider.name!r} failed after {provider.max_retries} attempts: {last}"
    )


def query_roi(
    provider: ProviderConfig,
    spec: PromptSpec,
    cache: QueryCache,
    transport: Transport | None = None,
    strict: bool = False,
) -> list[ParsedResponse]:
    """Fetch (or replay) `repeats` responses for one region.

    Raw text is persisted to the cache before parsing, so a failed parse
    leaves the response inspectable; cached repeats never touch the network.
    A network failure carries the repeats parsed so far in ``partial``.
    """
    transport = transport or http_transport
    ph = prompt_hash(spec)
    prompt = None
    results: list[ParsedResponse] = []
    for repeat in range(provider.repeats):
        entry = cache.load(ph, provider.name, repeat)
        if entry is None:
            if prompt is None:
                prompt = build_prompt(spec)
            try:
                raw = _call_provider(provider, prompt, transport)
            except ProviderError as exc:
                raise ProviderError(
                    f"roi {spec.roi!r} repeat {repeat}: {exc}", partial=results
                ) from exc
            entry = QueryCacheEntry(
                prompt_hash=ph,
                provider=provider.name,
                repeat=repeat,
                raw_text=raw,
                parsed_row=None,
                created_at=datetime.now(timezone.utc).isoformat(),
            )
            cache.store(entry)
        try:
            parsed = parse_response(
                entry.raw_text,
                spec.atlas,
                spec.roi,
                strict=strict,
                provider=provider.name,
                timestamp=entry.created_at,
            )
        except ParseError as exc:
            raise ParseError(
                f"roi {spec.roi!r} repeat {repeat}: {exc}",
                raw_ref=str(cache.path_for(ph, provider.name, repeat)),
            ) from exc
        if entry.parsed_row is None:
            cache.store(
                QueryCacheEntry(
                    prompt_hash=ph,
                    provider=provider.name,
                    repeat=repeat,
                    raw_text=entry.raw_text,
                    parsed_row=tuple(float(v) for v in parsed.row),
                    created_at=entry.created_at,
                )
            )
        results.append(parsed)
    return results


def assemble_graph(
    rows: Mapping[str, np.ndarray],
    atlas: RegionAtlas,
    provenance: Sequence[tuple[str, int, str]] = (),
) -> ProbabilisticGraph:
    """Stack per-region strength rows into a matrix (diagonal forced to 0)."""
    missing = [n for n in atlas.names if n not in rows]
    if missing:
        raise DataError(f"missing rows for regions: {', '.join(missing)}")
    unknown = [n for n in rows if n not in atlas]
    if unknown:
        raise DataError(f"rows for unknown regions: {', '.join(sorted(unknown))}")
    d = atlas.count
    weights = np.zeros((d, d))
    for i, name in enumerate(atlas.names):
        row = np.asarray(rows[name], dtype=float)
        if row.shape != (d,):
            raise DataError(f"row for {name!r} has length {row.size}, expected {d}")
        if np.any(row < 0) or np.any(row > 1):
            raise DataError(f"row for {name!r} has entries outside [0, 1]")
        weights[i] = row
    np.fill_diagonal(weights, 0.0)
    return ProbabilisticGraph(
        graph=WeightedGraph(atlas, weights), provenance=tuple(provenance)
    )


def average_graphs(graphs: Sequence[ProbabilisticGraph]) -> ProbabilisticGraph:
    """Entrywise mean, nested by provider.

    Repeats are first averaged within each provider, then the per-provider
    means are averaged with equal weight, so a provider contributing more
    repeats does not dominate a blend of providers. With a single provider
    (or no provenance) this reduces to the plain arithmetic mean.
    """
    if not graphs:
        raise DataError("no graphs to average")
    atlas = graphs[0].atlas
    if any(g.atlas != atlas for g in graphs):
        raise DataError("graphs do not share an atlas")

    groups: dict[tuple[str, ...], list[np.ndarray]] = {}
    for g in graphs:
        key = tuple(sorted({p for p, _, _ in g.provenance})) or ("",)
        groups.setdefault(key, []).append(g.weights)
    group_means = [np.mean(ws, axis=0) for ws in groups.values()]
    final = np.mean(group_means, axis=0)
    provenance: list[tuple[str, int, str]] = []
    for g in graphs:
        for item in g.provenance:
            if item not in provenance:
                provenance.append(item)
    return ProbabilisticGraph(
        graph=WeightedGraph(atlas, final), provenance=tuple(provenance)
    )


def infer_graph(
    atlas: RegionAtlas,
    factors: Sequence[str],
    providers: Sequence[ProviderConfig],
    cache: QueryCache,
    transport: Transport | None = None,
    template_version: str = DEFAULT_TEMPLATE_VERSION,
    strict: bool = False,
    max_workers: int = 4,
) -> tuple[ProbabilisticGraph, list[ReasoningRecord]]:
    """Run the full pipeline: every region, every provider, every repeat.

    Distinct regions are queried concurrently up to ``max_workers``; results
    are assembled in fixed (provider, repeat, region) order so the output is
    independent of completion order.
    """
    if not providers:
        raise DataError("no providers configured")
    specs = {
        name: PromptSpec(
            atlas=atlas,
            factors=tuple(factors),
            roi=name,
            template_version=template_version,
        )
        for name in atlas.names
    }

    responses: dict[tuple[str, str], list[ParsedResponse]] = {}

    def fetch(provider: ProviderConfig, roi: str):
        return (provider.name, roi), query_roi(
            provider, specs[roi], cache, transport=transport, strict=strict
        )

    jobs = [(p, roi) for p in providers for roi in atlas.names]
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            for key, value in pool.map(lambda args: fetch(*args), jobs):
                responses[key] = value
    else:
        for p, roi in jobs:
            key, value = fetch(p, roi)
            responses[key] = value

    per_repeat: list[ProbabilisticGraph] = []
    records: list[ReasoningRecord] = []
    for provider in providers:
        for repeat in range(provider.repeats):
            rows = {
                roi: responses[(provider.name, roi)][repeat].row
                for roi in atlas.names
            }
            provenance = [
                (provider.name, repeat, prompt_hash(specs[roi]))
                for roi in atlas.names
            ]
            per_repeat.append(assemble_graph(rows, atlas, provenance))
        for roi in atlas.names:
            for repeat, parsed in enumerate(responses[(provider.name, roi)]):
                records.extend(parsed.records)
    return average_graphs(per_repeat), records


def write_reasoning_json(path, records: Sequence[ReasoningRecord]) -> None:
    """Sidecar export of the reasoning documentation."""
    doc = [
        {
            "roi": r.roi,
            "target": r.target,
            "strength": r.strength,
            "rationale": r.rationale_text,
            "factor_tags": list(r.factor_tags),
            "provider": r.provider,
            "timestamp": r.timestamp,
        }
        for r in records
    ]
    Path(path).write_text(json.dumps(doc, indent=2), encoding="utf-8")
