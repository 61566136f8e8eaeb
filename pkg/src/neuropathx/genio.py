"""Readers and writers for the tabular input files.

All readers keep file order for rows and columns; only :func:`align_cohort`
re-orders subjects (lexicographically). Every parse error carries the file
path and the 1-based line number of the offending line.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DuplicateKey,
    EmptyCohort,
    InvalidInterval,
    MalformedLine,
    MalformedValue,
)

MISSING = float("nan")
MISSING_TOKENS = ("NA", ".")
_DOSAGE = {"0": 0.0, "1": 1.0, "2": 2.0, "NA": MISSING, ".": MISSING}

GENOTYPE_HEADER = ("snp_id", "chrom", "pos")
GWAS_HEADER = ("snp_id", "chrom", "pos", "beta")
GENES_HEADER = ("gene_symbol", "chrom", "start", "end")
LABELS_HEADER = ("subject_id", "label")


@dataclass(frozen=True)
class SnpRecord:
    snp_id: str
    chrom: str
    pos: int


@dataclass(frozen=True)
class GwasRecord:
    snp_id: str
    chrom: str
    pos: int
    effect_size: float


@dataclass(frozen=True)
class GeneRecord:
    gene_symbol: str
    chrom: str
    start: int
    end: int


@dataclass(frozen=True)
class PathwayDef:
    pathway_id: str
    description: str
    gene_symbols: tuple


@dataclass(eq=False)
class GenotypeTable:
    """Dosages are subjects x SNPs, float64, with NaN marking MISSING."""

    subject_ids: list
    snps: list
    dosages: np.ndarray

    def __post_init__(self):
        if self.dosages.shape != (len(self.subject_ids), len(self.snps)):
            raise ValueError(
                f"dosage shape {self.dosages.shape} does not match "
                f"{len(self.subject_ids)} subjects x {len(self.snps)} SNPs"
            )

    def __eq__(self, other):
        if not isinstance(other, GenotypeTable):
            return NotImplemented
        return (
            list(self.subject_ids) == list(other.subject_ids)
            and list(self.snps) == list(other.snps)
            and np.array_equal(self.dosages, other.dosages, equal_nan=True)
        )

    def subset(self, rows):
        rows = list(rows)
        return GenotypeTable(
            [self.subject_ids[r] for r in rows], list(self.snps), self.dosages[rows]
        )


@dataclass(eq=False)
class ImagingTable:
    """Features are subjects x ROIs x d."""

    subject_ids: list
    roi_labels: list
    features: np.ndarray
    feature_names: list

    def __eq__(self, other):
        if not isinstance(other, ImagingTable):
            return NotImplemented
        return (
            list(self.subject_ids) == list(other.subject_ids)
            and list(self.roi_labels) == list(other.roi_labels)
            and list(self.feature_names) == list(other.feature_names)
            and np.array_equal(self.features, other.features)
        )

    def subset(self, rows):
        rows = list(rows)
        return ImagingTable(
            [self.subject_ids[r] for r in rows],
            list(self.roi_labels),
            self.features[rows],
            list(self.feature_names),
        )


@dataclass(eq=False)
class LabelTable:
    """Binary labels, 1 = PAT, 0 = NC."""

    subject_ids: list
    labels: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, LabelTable):
            return NotImplemented
        return list(self.subject_ids) == list(other.subject_ids) and np.array_equal(
            self.labels, other.labels
        )

    def subset(self, rows):
        rows = list(rows)
        return LabelTable([self.subject_ids[r] for r in rows], self.labels[rows])


@dataclass
class AlignedCohort:
    genotypes: GenotypeTable
    imaging: ImagingTable
    labels: LabelTable
    dropped: dict = field(default_factory=dict)

    @property
    def subject_ids(self):
        return self.labels.subject_ids


def _lines(path):
    """Yield (line_number, text) with line endings stripped. Handles CRLF and BOM."""
    with open(path, encoding="utf-8-sig", newline=None) as fh:
        for i, raw in enumerate(fh, start=1):
            yield i, raw.rstrip("\n").rstrip("\r")


def _check_header(path, fields, expected, sep_name):
    if tuple(fields[: len(expected)]) != expected:
        raise MalformedLine(
            f"expected header starting with {sep_name.join(expected)!r}, "
            f"got {sep_name.join(fields)!r}",
            path,
            1,
        )


def _parse_int(token, path, line, what):
    try:
        value = int(token)
    except ValueError:
        raise MalformedValue(f"{what} {token!r} is not an integer", path, line) from None
    return value


def _parse_pos(token, path, line):
    pos = _parse_int(token, path, line, "position")
    if pos < 1:
        raise MalformedValue(f"position {pos} must be >= 1", path, line)
    return pos


def _parse_finite(token, path, line, what):
    try:
        value = float(token)
    except ValueError:
        raise MalformedValue(f"{what} {token!r} is not a number", path, line) from None
    if not math.isfinite(value):
        raise MalformedValue(f"{what} {token!r} is not finite", path, line)
    return value


def _fmt(x):
    return repr(float(x))


def parse_genotypes(path):
    """Read ``genotypes.tsv`` (one SNP per row, one subject per column)."""
    it = _lines(path)
    try:
        _, header = next(it)
    except StopIteration:
        raise MalformedLine("empty genotype file", path, 1) from None
    cols = header.split("\t")
    _check_header(path, cols, GENOTYPE_HEADER, "\t")
    subject_ids = cols[3:]
    if len(set(subject_ids)) != len(subject_ids):
        raise DuplicateKey("duplicate subject column", path, 1)
    n_subj = len(subject_ids)
    snps, rows, seen = [], [], set()
    for line_no, text in it:
        if not text.strip():
            continue
        fields = text.split("\t")
        if len(fields) != n_subj + 3:
            raise MalformedLine(
                f"expected {n_subj + 3} fields, got {len(fields)}", path, line_no
            )
        snp_id, chrom = fields[0], fields[1]
        if not snp_id or not chrom:
            raise MalformedValue("empty snp_id or chrom", path, line_no)
        if snp_id in seen:
            raise DuplicateKey(f"duplicate snp_id {snp_id!r}", path, line_no)
        seen.add(snp_id)
        pos = _parse_pos(fields[2], path, line_no)
        try:
            rows.append([_DOSAGE[tok] for tok in fields[3:]])
        except KeyError:
            bad = next(t for t in fields[3:] if t not in _DOSAGE)
            raise MalformedValue(
                f"dosage token {bad!r} not in {{0,1,2,NA,.}}", path, line_no
            ) from None
        snps.append(SnpRecord(snp_id, chrom, pos))
    dosages = np.array(rows, dtype=np.float64).reshape(len(snps), n_subj).T.copy()
    return GenotypeTable(subject_ids, snps, dosages)


def write_genotypes(table, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(GENOTYPE_HEADER + tuple(table.subject_ids)) + "\n")
        for j, snp in enumerate(table.snps):
            col = table.dosages[:, j]
            toks = ["NA" if math.isnan(v) else str(int(v)) for v in col]
            fh.write("\t".join([snp.snp_id, snp.chrom, str(snp.pos)] + toks) + "\n")


def parse_gwas(path):
    """Read GWAS summary statistics: snp_id, chrom, pos, beta."""
    records, seen = [], set()
    for line_no, text in _lines(path):
        fields = text.split("\t")
        if line_no == 1:
            _check_header(path, fields, GWAS_HEADER, "\t")
            continue
        if not text.strip():
            continue
        if len(fields) < 4:
            raise MalformedLine(f"expected 4 fields, got {len(fields)}", path, line_no)
        snp_id = fields[0]
        if snp_id in seen:
            raise DuplicateKey(f"duplicate snp_id {snp_id!r}", path, line_no)
        seen.add(snp_id)
        pos = _parse_pos(fields[2], path, line_no)
        beta = _parse_finite(fields[3], path, line_no, "beta")
        records.append(GwasRecord(snp_id, fields[1], pos, beta))
    return records


def write_gwas(records, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(GWAS_HEADER) + "\n")
        for r in records:
            fh.write(f"{r.snp_id}\t{r.chrom}\t{r.pos}\t{_fmt(r.effect_size)}\n")


def parse_gene_annotations(path):
    """Read gene coordinates: gene_symbol, chrom, start, end."""
    records, seen = [], set()
    for line_no, text in _lines(path):
        fields = text.split("\t")
        if line_no == 1:
            _check_header(path, fields, GENES_HEADER, "\t")
            continue
        if not text.strip():
            continue
        if len(fields) < 4:
            raise MalformedLine(f"expected 4 fields, got {len(fields)}", path, line_no)
        symbol = fields[0]
        if symbol in seen:
            raise DuplicateKey(f"duplicate gene_symbol {symbol!r}", path, line_no)
        seen.add(symbol)
        start = _parse_int(fields[2], path, line_no, "start")
        end = _parse_int(fields[3], path, line_no, "end")
        if start > end:
            raise InvalidInterval(f"start {start} > end {end} for {symbol}", path, line_no)
        records.append(GeneRecord(symbol, fields[1], start, end))
    if not records:
        warnings.warn(f"{path}: no gene records", stacklevel=2)
    return records


def write_genes(records, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(GENES_HEADER) + "\n")
        for r in records:
            fh.write(f"{r.gene_symbol}\t{r.chrom}\t{r.start}\t{r.end}\n")


def parse_gmt(path, exclusion_list=()):
    """Read a GMT gene-set file, dropping pathways listed in ``exclusion_list``.

    Repeated genes within a line are kept once, at first occurrence.
    """
    excluded = set(exclusion_list)
    pathways, seen = [], set()
    for line_no, text in _lines(path):
        if not text.strip():
            continue
        fields = text.split("\t")
        genes = [g for g in fields[2:] if g]
        if len(fields) < 3 or not fields[0] or not genes:
            raise MalformedLine(
                "GMT line needs pathway_id, description and at least one gene",
                path,
                line_no,
            )
        pid = fields[0]
        if pid in seen:
            raise DuplicateKey(f"duplicate pathway_id {pid!r}", path, line_no)
        seen.add(pid)
        if pid in excluded:
            continue
        pathways.append(PathwayDef(pid, fields[1], tuple(dict.fromkeys(genes))))
    return pathways


def write_gmt(pathways, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in pathways:
            fh.write("\t".join((p.pathway_id, p.description) + tuple(p.gene_symbols)) + "\n")


def parse_exclusions(path):
    """One pathway_id per line; blank lines and ``#`` comments ignored."""
    out = set()
    for _, text in _lines(path):
        token = text.strip()
        if token and not token.startswith("#"):
            out.add(token)
    return out


def write_exclusions(ids, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for pid in sorted(ids):
            fh.write(pid + "\n")


def parse_imaging(path):
    """Read long-format ROI features, one row per subject x ROI.

    Subject order and ROI order follow first appearance. Every subject must
    list the same ROI set.
    """
    it = _lines(path)
    try:
        _, header = next(it)
    except StopIteration:
        raise MalformedLine("empty imaging file", path, 1) from None
    cols = [c.strip() for c in header.split(",")]
    if cols[:2] != ["subject_id", "roi_label"] or len(cols) < 3:
        raise MalformedLine(
            "expected header 'subject_id,roi_label,feat_1,...'", path, 1
        )
    feature_names = cols[2:]
    d = len(feature_names)
    subjects, rois, values = {}, {}, {}
    last_line = 1
    for line_no, text in it:
        last_line = line_no
        if not text.strip():
            continue
        fields = [f.strip() for f in text.split(",")]
        if len(fields) != d + 2:
            raise MalformedLine(f"expected {d + 2} fields, got {len(fields)}", path, line_no)
        sid, roi = fields[0], fields[1]
        key = (sid, roi)
        if key in values:
            raise DuplicateKey(f"duplicate row for subject {sid!r} ROI {roi!r}", path, line_no)
        values[key] = [_parse_finite(t, path, line_no, "feature") for t in fields[2:]]
        subjects.setdefault(sid, line_no)
        rois.setdefault(roi, line_no)
    subject_ids, roi_labels = list(subjects), list(rois)
    features = np.empty((len(subject_ids), len(roi_labels), d), dtype=np.float64)
    for a, sid in enumerate(subject_ids):
        for b, roi in enumerate(roi_labels):
            try:
                features[a, b] = values[(sid, roi)]
            except KeyError:
                raise MalformedLine(
                    f"subject {sid!r} lacks ROI {roi!r}", path, last_line
                ) from None
    return ImagingTable(subject_ids, roi_labels, features, feature_names)


def write_imaging(table, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(["subject_id", "roi_label"] + list(table.feature_names)) + "\n")
        for a, sid in enumerate(table.subject_ids):
            for b, roi in enumerate(table.roi_labels):
                vals = ",".join(_fmt(v) for v in table.features[a, b])
                fh.write(f"{sid},{roi},{vals}\n")


def parse_labels(path):
    """Read ``subject_id,label`` rows. The header line is optional."""
    ids, labels, seen = [], [], set()
    last_line = 1
    for line_no, text in _lines(path):
        last_line = line_no
        if not text.strip():
            continue
        fields = [f.strip() for f in text.split(",")]
        if line_no == 1 and tuple(fields) == LABELS_HEADER:
            continue
        if len(fields) != 2:
            raise MalformedLine(f"expected 2 fields, got {len(fields)}", path, line_no)
        sid, tok = fields
        if tok not in ("0", "1"):
            raise MalformedValue(f"label {tok!r} not in {{0,1}}", path, line_no)
        if sid in seen:
            raise DuplicateKey(f"duplicate subject_id {sid!r}", path, line_no)
        seen.add(sid)
        ids.append(sid)
        labels.append(int(tok))
    arr = np.array(labels, dtype=np.int64)
    if len(set(labels)) < 2:
        raise MalformedValue("labels must contain both classes (0 and 1)", path, last_line)
    return LabelTable(ids, arr)


def write_labels(table, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(LABELS_HEADER) + "\n")
        for sid, y in zip(table.subject_ids, table.labels):
            fh.write(f"{sid},{int(y)}\n")


def align_cohort(genotypes, imaging, labels):
    """Restrict all three tables to their shared subjects, sorted by id.

    Returns an :class:`AlignedCohort` whose ``dropped`` maps each source
    name to the subject ids it lost.
    """
    sources = {
        "genotypes": genotypes.subject_ids,
        "imaging": imaging.subject_ids,
        "labels": labels.subject_ids,
    }
    shared = set(genotypes.subject_ids) & set(imaging.subject_ids) & set(labels.subject_ids)
    if not shared:
        raise EmptyCohort("no subject appears in genotypes, imaging and labels")
    keep = sorted(shared)
    dropped = {name: sorted(set(ids) - shared) for name, ids in sources.items()}

    def rows(ids):
        index = {sid: i for i, sid in enumerate(ids)}
        return [index[sid] for sid in keep]

    return AlignedCohort(
        genotypes.subset(rows(genotypes.subject_ids)),
        imaging.subset(rows(imaging.subject_ids)),
        labels.subset(rows(labels.subject_ids)),
        dropped,
    )

