"""EHR record schema, ingestion, synthetic cohorts, splits, and dataset statistics.

Dataset files are UTF-8 JSON Lines, one patient per line::

    {"patient_id": "p0", "visits": [{"diagnoses": [..], "procedures": [..],
                                     "medications": [..], "admit_day": 12}, ...]}

``admit_day`` is optional. Serialization is canonical (sorted keys, sorted
deduplicated code lists), so load followed by save is byte-identical on
validated data. A sidecar vocab file carries the three vocabulary sizes.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .medications import split_medications
from .metrics import jaccard
from .rng import substream


class DataError(ValueError):
    """Raised on malformed dataset content; message carries line/field context."""


@dataclass
class Vocab:
    num_diagnoses: int
    num_procedures: int
    num_medications: int

    def __post_init__(self):
        for name in ("num_diagnoses", "num_procedures", "num_medications"):
            if getattr(self, name) < 1:
                raise DataError(f"vocab {name} must be >= 1, got {getattr(self, name)}")


def save_vocab(path, vocab: Vocab) -> None:
    obj = {
        "num_diagnoses": vocab.num_diagnoses,
        "num_procedures": vocab.num_procedures,
        "num_medications": vocab.num_medications,
    }
    Path(path).write_text(json.dumps(obj, sort_keys=True) + "\n", encoding="utf-8")


def load_vocab(path) -> Vocab:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        return Vocab(int(obj["num_diagnoses"]), int(obj["num_procedures"]),
                     int(obj["num_medications"]))
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: bad vocab file ({exc})") from exc


@dataclass
class Visit:
    diagnoses: tuple[int, ...]
    procedures: tuple[int, ...]
    medications: tuple[int, ...]
    admit_day: int | None = None


@dataclass
class PatientRecord:
    patient_id: str
    visits: list[Visit] = field(default_factory=list)


_CODE_FIELDS = (("diagnoses", "num_diagnoses"), ("procedures", "num_procedures"),
                ("medications", "num_medications"))


def _parse_codes(raw, limit: int, where: str) -> tuple[int, ...]:
    if not isinstance(raw, list):
        raise DataError(f"{where} must be a list")
    codes = []
    for k, value in enumerate(raw):
        if isinstance(value, bool) or not isinstance(value, int):
            raise DataError(f"{where}[{k}] must be an integer")
        if value < 0 or value >= limit:
            raise DataError(f"{where}[{k}] out of range ({value} not in [0, {limit}))")
        codes.append(value)
    deduped = tuple(sorted(set(codes)))
    if len(deduped) != len(codes):
        warnings.warn(f"{where}: duplicate codes removed", stacklevel=3)
    return deduped


def record_from_obj(obj, vocab: Vocab, where: str = "record") -> PatientRecord:
    """Validate and normalize one JSON object into a PatientRecord."""
    if not isinstance(obj, dict):
        raise DataError(f"{where}: expected an object")
    pid = obj.get("patient_id")
    if not isinstance(pid, str) or not pid:
        raise DataError(f"{where}: patient_id must be a non-empty string")
    raw_visits = obj.get("visits")
    if not isinstance(raw_visits, list) or not raw_visits:
        raise DataError(f"{where}: visits must be a non-empty list")
    visits = []
    prev_day = None
    for i, rv in enumerate(raw_visits):
        vw = f"{where}: visits[{i}]"
        if not isinstance(rv, dict):
            raise DataError(f"{vw} must be an object")
        parsed = {}
        for fname, vname in _CODE_FIELDS:
            parsed[fname] = _parse_codes(rv.get(fname, []), getattr(vocab, vname),
                                         f"{vw}.{fname}")
        day = rv.get("admit_day")
        if day is not None:
            if isinstance(day, bool) or not isinstance(day, int) or day < 0:
                raise DataError(f"{vw}.admit_day must be a nonnegative integer")
            if prev_day is not None and day <= prev_day:
                raise DataError(f"{vw}.admit_day not strictly increasing ({day} after {prev_day})")
            prev_day = day
        visits.append(Visit(parsed["diagnoses"], parsed["procedures"],
                            parsed["medications"], day))
    return PatientRecord(pid, visits)


def record_to_obj(record: PatientRecord) -> dict:
    visits = []
    for v in record.visits:
        obj = {
            "diagnoses": sorted(set(v.diagnoses)),
            "procedures": sorted(set(v.procedures)),
            "medications": sorted(set(v.medications)),
        }
        if v.admit_day is not None:
            obj["admit_day"] = int(v.admit_day)
        visits.append(obj)
    return {"patient_id": record.patient_id, "visits": visits}


def load_dataset(path, vocab: Vocab, on_error: str = "raise",
                 report: list[str] | None = None) -> list[PatientRecord]:
    """Read and validate a JSON Lines dataset.

    ``on_error='raise'`` fails fast on the first bad line; ``'skip'`` drops
    bad lines, appending one message per skipped line to ``report``.
    """
    if on_error not in ("raise", "skip"):
        raise ValueError(f"on_error must be 'raise' or 'skip', got {on_error!r}")
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"line {lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                err = DataError(f"{where}: invalid JSON ({exc.msg})")
                if on_error == "raise":
                    raise err from exc
                if report is not None:
                    report.append(str(err))
                continue
            try:
                records.append(record_from_obj(obj, vocab, where))
            except DataError as err:
                if on_error == "raise":
                    raise
                if report is not None:
                    report.append(str(err))
    return records


def save_dataset(path, records: Iterable[PatientRecord]) -> None:
    """Write records as canonical JSON Lines (sorted keys, sorted code sets)."""
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record_to_obj(record), sort_keys=True,
                                separators=(",", ":")))
            fh.write("\n")


# -- synthetic cohort --------------------------------------------------------


@dataclass
class GeneratorConfig:
    """Knobs for the synthetic cohort generator.

    Defaults mirror a mid-sized inpatient cohort: ~2.37 visits per patient
    capped at 29, vocabularies of 1958/1430/131 codes, and roughly 30% newly
    introduced drugs per repeat prescription.
    """

    num_patients: int = 1000
    mean_visits: float = 2.37
    max_visits: int = 29
    num_diagnoses: int = 1958
    num_procedures: int = 1430
    num_medications: int = 131
    target_new_drug_ratio: float = 0.30
    similarity_decay_rate: float = 0.004  # per-day drug drop-out hazard
    seed: int = 0

    def validate(self) -> None:
        if self.num_patients < 1:
            raise DataError("num_patients must be >= 1")
        if self.mean_visits < 1.0:
            raise DataError("mean_visits must be >= 1")
        if self.max_visits < 1:
            raise DataError("max_visits must be >= 1")
        if not 0.0 <= self.target_new_drug_ratio <= 1.0:
            raise DataError(
                f"target_new_drug_ratio must be in [0, 1], got {self.target_new_drug_ratio}")
        if self.similarity_decay_rate < 0.0:
            raise DataError("similarity_decay_rate must be >= 0")
        for name in ("num_diagnoses", "num_procedures", "num_medications"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be >= 1")

    def vocab(self) -> Vocab:
        return Vocab(self.num_diagnoses, self.num_procedures, self.num_medications)


@dataclass
class _Cluster:
    diag_core: list[int]
    diag_extra: list[int]
    proc_pool: list[int]
    meds: list[int]


def _partition(codes: np.ndarray, k: int) -> list[list[int]]:
    return [sorted(int(c) for c in chunk) for chunk in np.array_split(codes, k)]


def _build_clusters(config: GeneratorConfig, rng: np.random.Generator) -> list[_Cluster]:
    k = max(4, min(48, config.num_medications // 3))
    diag_groups = _partition(rng.permutation(config.num_diagnoses), k)
    proc_groups = _partition(rng.permutation(config.num_procedures), k)
    med_groups = _partition(rng.permutation(config.num_medications), k)
    clusters = []
    for dg, pg, mg in zip(diag_groups, proc_groups, med_groups):
        dg = dg or [0]
        core_n = min(2, len(dg))
        clusters.append(_Cluster(
            diag_core=dg[:core_n],
            diag_extra=dg[core_n:] or dg,
            proc_pool=pg or [0],
            meds=mg,
        ))
    return [c for c in clusters if c.meds]


def generate_cohort(config: GeneratorConfig) -> list[PatientRecord]:
    """Deterministically generate a cohort with reuse/novelty structure.

    Each patient holds a set of active condition clusters that randomly
    activates and deactivates between visits (hazards scale with the day
    gap). Diagnoses come from active clusters' code pools; prescriptions are
    the union of drugs persisting from the previous visit (kept with a
    probability decaying in the day gap), occasional reintroductions of
    older drugs, and the drugs linked to newly activated clusters — so drug
    novelty is tied to newly appearing diagnoses, and prescription
    similarity decays with the time between admissions.
    """
    config.validate()
    rng = substream(config.seed, "cohort")
    clusters = _build_clusters(config, rng)
    k = len(clusters)
    ratio = config.target_new_drug_ratio
    records = []
    for p in range(config.num_patients):
        t_total = min(int(rng.geometric(1.0 / config.mean_visits)), config.max_visits)
        active: set[int] = set()
        pool = list(range(k))
        start = rng.choice(k, size=min(k, 1 + rng.poisson(0.8)), replace=False)
        active.update(int(c) for c in start)
        seen_meds: set[int] = set()
        prev_meds: set[int] = set()
        last_use: dict[int, int] = {}
        day = int(rng.integers(0, 30))
        visits = []
        for t in range(t_total):
            if t > 0:
                gap = int(rng.integers(20, 91))
                day += gap
                # Cluster turnover: longer gaps mean more drift.
                p_deact = 1.0 - np.exp(-0.004 * gap)
                active = {c for c in active if rng.random() > p_deact}
            else:
                gap = 0

            meds: set[int] = set()
            new_cluster_ids: list[int] = []
            if t == 0:
                for c in active:
                    meds.update(m for m in clusters[c].meds if rng.random() < 0.85)
                new_cluster_ids = sorted(active)
            else:
                p_keep = float(np.exp(-config.similarity_decay_rate * gap))
                active_meds = set()
                for c in active:
                    active_meds.update(clusters[c].meds)
                for m in sorted(prev_meds):
                    keep = p_keep if m in active_meds else 0.35 * p_keep
                    if rng.random() < keep:
                        meds.add(m)
                # Occasional reuse of drugs older than the previous visit;
                # the longer ago a drug was last prescribed, the less likely
                # it comes back.
                for m in sorted(seen_meds - prev_meds):
                    idle = day - last_use[m]
                    p_back = 0.12 * float(np.exp(-config.similarity_decay_rate * idle))
                    if m in active_meds and rng.random() < p_back:
                        meds.add(m)
                # Introduce new clusters until the novelty share is near target.
                n_old = len(meds)
                want_new = rng.poisson(ratio / max(1.0 - ratio, 1e-9) * max(n_old, 1))
                candidates = [c for c in pool if c not in active
                              and set(clusters[c].meds) - seen_meds]
                rng.shuffle(candidates)
                novel: list[int] = []
                for c in candidates:
                    if len(novel) >= want_new:
                        break
                    fresh = sorted(set(clusters[c].meds) - seen_meds)
                    picked = [m for m in fresh if rng.random() < 0.85]
                    picked = picked[:max(want_new - len(novel), 0)]
                    if picked:
                        active.add(c)
                        new_cluster_ids.append(c)
                        novel.extend(picked)
                meds.update(novel)
            if not meds:
                c = sorted(active)[0] if active else int(rng.integers(0, k))
                active.add(c)
                meds.add(clusters[c].meds[int(rng.integers(0, len(clusters[c].meds)))])

            diags: set[int] = set()
            procs: set[int] = set()
            for c in sorted(active):
                diags.update(clusters[c].diag_core)
                extra = clusters[c].diag_extra
                n_extra = int(rng.integers(0, 3))
                for _ in range(n_extra):
                    diags.add(extra[int(rng.integers(0, len(extra)))])
                ppool = clusters[c].proc_pool
                n_proc = int(rng.integers(0, 3))
                for _ in range(n_proc):
                    procs.add(ppool[int(rng.integers(0, len(ppool)))])
            # Light noise codes outside the active clusters.
            for _ in range(int(rng.integers(0, 2))):
                diags.add(int(rng.integers(0, config.num_diagnoses)))

            visits.append(Visit(tuple(sorted(diags)), tuple(sorted(procs)),
                                tuple(sorted(meds)), day))
            seen_meds |= meds
            prev_meds = set(meds)
            for m in meds:
                last_use[m] = day
        records.append(PatientRecord(f"p{p:06d}", visits))
    vocab = config.vocab()
    for r in records:
        record_from_obj(record_to_obj(r), vocab, where=r.patient_id)
    return records


def split_dataset(records: Sequence[PatientRecord], ratios: Sequence[float],
                  seed: int) -> tuple[list[PatientRecord], list[PatientRecord], list[PatientRecord]]:
    """Patient-level train/validation/test partition, deterministic in seed.

    Sizes follow the largest-remainder rule so they sum exactly to the
    cohort size; an empty part is an error.
    """
    if len(ratios) != 3:
        raise DataError(f"expected 3 split ratios, got {len(ratios)}")
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"split ratios must be nonnegative and sum to 1, got {list(ratios)}")
    n = len(records)
    base = [int(np.floor(r * n)) for r in ratios]
    remainder = n - sum(base)
    fracs = sorted(range(3), key=lambda i: (-(ratios[i] * n - base[i]), i))
    for i in range(remainder):
        base[fracs[i % 3]] += 1
    if any(b == 0 for b in base):
        raise DataError(f"split produced an empty part: sizes {base} from {n} patients")
    order = substream(seed, "split").permutation(n)
    parts: list[list[PatientRecord]] = []
    offset = 0
    for size in base:
        parts.append([records[int(i)] for i in order[offset:offset + size]])
        offset += size
    return parts[0], parts[1], parts[2]


# -- dataset statistics ------------------------------------------------------


@dataclass
class NewDrugStats:
    """Histogram of per-prescription new-drug proportions.

    First visits count as ratio 1 when nonempty (everything is new); empty
    prescriptions are skipped. ``mean_repeat`` restricts to visits with
    history (the only visits where the old/new distinction is informative)
    and is the headline novelty share.
    """

    bin_edges: list[float]
    counts: list[int]
    mean_all: float
    mean_repeat: float
    prescriptions: int
    first_visits: int
    repeat_visits: int
    skipped_empty: int

    def to_obj(self) -> dict:
        return {
            "bin_edges": self.bin_edges,
            "counts": self.counts,
            "mean_all": self.mean_all,
            "mean_repeat": self.mean_repeat,
            "prescriptions": self.prescriptions,
            "first_visits": self.first_visits,
            "repeat_visits": self.repeat_visits,
            "skipped_empty": self.skipped_empty,
        }


def stats_new_drug_histogram(records: Sequence[PatientRecord], num_bins: int) -> NewDrugStats:
    if num_bins < 1:
        raise DataError(f"num_bins must be >= 1, got {num_bins}")
    limit = 1
    for r in records:
        for v in r.visits:
            if v.medications:
                limit = max(limit, max(v.medications) + 1)
    ratios = []
    repeat = []
    first_visits = repeat_visits = skipped = 0
    for r in records:
        history = [v.medications for v in r.visits]
        split = split_medications(history, limit)
        for i, meds in enumerate(history):
            if not meds:
                skipped += 1
                continue
            ratio = len(split.new_seq[i]) / len(meds)
            ratios.append(ratio)
            if i == 0:
                first_visits += 1
            else:
                repeat_visits += 1
                repeat.append(ratio)
    counts, edges = np.histogram(ratios, bins=num_bins, range=(0.0, 1.0))
    return NewDrugStats(
        bin_edges=[float(e) for e in edges],
        counts=[int(c) for c in counts],
        mean_all=float(np.mean(ratios)) if ratios else 0.0,
        mean_repeat=float(np.mean(repeat)) if repeat else 0.0,
        prescriptions=len(ratios),
        first_visits=first_visits,
        repeat_visits=repeat_visits,
        skipped_empty=skipped,
    )


@dataclass
class IntervalBucket:
    bucket: int
    interval_lo: int
    interval_hi: int
    mean: float
    count: int


@dataclass
class SimilarityStats:
    """Mean prescription Jaccard per admission-interval bucket."""

    bucket_width: int
    buckets: list[IntervalBucket]

    def to_obj(self) -> dict:
        return {
            "bucket_width": self.bucket_width,
            "buckets": [
                {"bucket": b.bucket, "interval_lo": b.interval_lo,
                 "interval_hi": b.interval_hi, "mean": b.mean, "count": b.count}
                for b in self.buckets
            ],
        }


def stats_similarity_by_interval(records: Sequence[PatientRecord],
                                 bucket_width: int) -> SimilarityStats:
    """Group all ordered visit pairs by interval and average their Jaccard.

    The interval is the admit-day difference when both visits carry one,
    else the visit-index distance. Buckets are half-open
    [b*width, (b+1)*width).
    """
    if bucket_width < 1:
        raise DataError(f"bucket_width must be >= 1, got {bucket_width}")
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    for r in records:
        for i in range(len(r.visits)):
            for j in range(i + 1, len(r.visits)):
                vi, vj = r.visits[i], r.visits[j]
                if vi.admit_day is not None and vj.admit_day is not None:
                    interval = vj.admit_day - vi.admit_day
                else:
                    interval = j - i
                bucket = interval // bucket_width
                sim = jaccard(set(vi.medications), set(vj.medications))
                sums[bucket] = sums.get(bucket, 0.0) + sim
                counts[bucket] = counts.get(bucket, 0) + 1
    buckets = [
        IntervalBucket(b, b * bucket_width, (b + 1) * bucket_width,
                       sums[b] / counts[b], counts[b])
        for b in sorted(sums)
    ]
    return SimilarityStats(bucket_width, buckets)
