"""SNP -> gene -> pathway score construction.

A gene's score is the effect-size weighted sum of the dosages of the SNPs
inside its window; a pathway's score is the plain sum of its member genes'
scores. Sums run in file order so that results are reproducible bit for bit.
"""

import json
import math
from bisect import bisect_left, bisect_right
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import MalformedLine, MalformedValue

DEFAULT_WINDOW_KB = 50
STD_FLOOR = 1e-8


@dataclass
class SnpGeneMap:
    """``members[i]`` holds the SNP column indices (ascending) mapped to gene i."""

    gene_symbols: list
    members: list
    window_kb: int = DEFAULT_WINDOW_KB


@dataclass
class GenePathwayMap:
    """``members[k]`` holds gene indices for pathway k, in the pathway's gene order."""

    pathway_ids: list
    members: list


@dataclass
class DropReport:
    genes: list = field(default_factory=list)
    pathways: list = field(default_factory=list)

    def to_dict(self):
        return {"dropped_genes": self.genes, "dropped_pathways": self.pathways}

    def write(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


@dataclass(eq=False)
class GeneScores:
    subject_ids: list
    gene_symbols: list
    scores: np.ndarray


@dataclass(eq=False)
class PathwayMatrix:
    subject_ids: list
    pathway_ids: list
    scores: np.ndarray
    normalized: bool = False
    mean: np.ndarray = None
    std: np.ndarray = None

    def __eq__(self, other):
        if not isinstance(other, PathwayMatrix):
            return NotImplemented
        return (
            list(self.subject_ids) == list(other.subject_ids)
            and list(self.pathway_ids) == list(other.pathway_ids)
            and np.array_equal(self.scores, other.scores)
        )

    def subset(self, rows):
        rows = list(rows)
        return PathwayMatrix(
            [self.subject_ids[r] for r in rows],
            list(self.pathway_ids),
            self.scores[rows],
            self.normalized,
            self.mean,
            self.std,
        )


def build_snp_gene_map(snps, genes, window_kb=DEFAULT_WINDOW_KB):
    """Map SNP columns to every gene whose window contains them.

    SNP j belongs to gene i when both sit on the same chromosome and
    ``start - 1000*window_kb <= pos <= end + 1000*window_kb``.
    """
    if window_kb < 0:
        raise ValueError("window_kb must be >= 0")
    pad = int(window_kb) * 1000
    by_chrom = {}
    for j, snp in enumerate(snps):
        by_chrom.setdefault(snp.chrom, []).append((snp.pos, j))
    index = {}
    for chrom, items in by_chrom.items():
        items.sort()
        index[chrom] = ([p for p, _ in items], [j for _, j in items])
    members = []
    for gene in genes:
        if gene.chrom not in index:
            members.append(np.empty(0, dtype=np.int64))
            continue
        positions, cols = index[gene.chrom]
        lo = bisect_left(positions, gene.start - pad)
        hi = bisect_right(positions, gene.end + pad)
        members.append(np.array(sorted(cols[lo:hi]), dtype=np.int64))
    return SnpGeneMap([g.gene_symbol for g in genes], members, int(window_kb))


def impute_means(genotypes, train_idx=None):
    """Per-SNP mean dosage over the training subjects (0.0 when all are missing)."""
    rows = genotypes.dosages if train_idx is None else genotypes.dosages[list(train_idx)]
    with np.errstate(invalid="ignore"):
        counts = np.sum(~np.isnan(rows), axis=0)
        sums = np.nansum(rows, axis=0)
        means = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    return means


def _csr(groups, weights_of=None):
    indptr = np.zeros(len(groups) + 1, dtype=np.int64)
    for g, m in enumerate(groups):
        indptr[g + 1] = indptr[g] + len(m)
    indices = (
        np.concatenate([np.asarray(m, dtype=np.int64) for m in groups])
        if indptr[-1]
        else np.empty(0, dtype=np.int64)
    )
    if weights_of is None:
        weights = np.ones(len(indices), dtype=np.float64)
    else:
        weights = np.ascontiguousarray(weights_of[indices], dtype=np.float64)
    return indptr, np.ascontiguousarray(indices), weights


def gene_scores(genotypes, gwas, snp_map, impute_means, report=None):
    """Effect-size weighted dosage sums per gene.

    SNPs without a GWAS record are removed from every gene's set before
    summing; genes left with no SNPs are dropped and noted in ``report``.
    Missing dosages take the value in ``impute_means``.
    """
    beta_by_id = {r.snp_id: r.effect_size for r in gwas}
    betas = np.array([beta_by_id.get(s.snp_id, math.nan) for s in genotypes.snps])
    has_beta = ~np.isnan(betas)
    kept_symbols, kept_members = [], []
    for symbol, members in zip(snp_map.gene_symbols, snp_map.members):
        eff = members[has_beta[members]] if len(members) else members
        if len(eff) == 0:
            if report is not None:
                reason = "no SNP within window" if len(members) == 0 else "no SNP with GWAS effect size"
                report.genes.append({"gene": symbol, "reason": reason})
            continue
        kept_symbols.append(symbol)
        kept_members.append(eff)
    dose = genotypes.dosages
    missing = np.isnan(dose)
    if missing.any():
        dose = np.where(missing, np.broadcast_to(impute_means, dose.shape), dose)
    indptr, indices, weights = _csr(kept_members, np.where(has_beta, betas, 0.0))
    scores = kernels.segment_sum(np.ascontiguousarray(dose), indptr, indices, weights)
    return GeneScores(list(genotypes.subject_ids), kept_symbols, scores)


def build_gene_pathway_map(pathways, gene_symbols, report=None):
    """Index pathways by retained genes; pathways with no retained gene are dropped."""
    position = {g: i for i, g in enumerate(gene_symbols)}
    ids, members = [], []
    for p in pathways:
        idx = [position[g] for g in p.gene_symbols if g in position]
        if not idx:
            if report is not None:
                report.pathways.append({"pathway": p.pathway_id, "reason": "no retained gene"})
            continue
        ids.append(p.pathway_id)
        members.append(np.array(idx, dtype=np.int64))
    return GenePathwayMap(ids, members)


def pathway_scores(gene_matrix, gp_map, report=None):
    """Sum member gene scores into one score per pathway."""
    n_genes = gene_matrix.scores.shape[1]
    ids, groups = [], []
    for pid, members in zip(gp_map.pathway_ids, gp_map.members):
        members = np.asarray(members, dtype=np.int64)
        members = members[members < n_genes]
        if len(members) == 0:
            if report is not None:
                report.pathways.append({"pathway": pid, "reason": "all genes dropped"})
            continue
        ids.append(pid)
        groups.append(members)
    indptr, indices, weights = _csr(groups)
    scores = kernels.segment_sum(
        np.ascontiguousarray(gene_matrix.scores), indptr, indices, weights
    )
    return PathwayMatrix(list(gene_matrix.subject_ids), ids, scores)


def column_stats(values, train_idx):
    """Training mean and population std per column (std below floor -> 0)."""
    train = values[list(train_idx)]
    if train.shape[0] == 0:
        raise ValueError("train_idx must be nonempty")
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    std = np.where(std < STD_FLOOR, 0.0, std)
    return mean, std


def apply_zscore(values, mean, std):
    centered = values - mean
    safe = np.where(std > 0.0, std, 1.0)
    return np.where(std > 0.0, centered / safe, 0.0)


def normalize_pathways(matrix, train_idx):
    """Z-score each pathway column with training-subject statistics."""
    mean, std = column_stats(matrix.scores, train_idx)
    return PathwayMatrix(
        list(matrix.subject_ids),
        list(matrix.pathway_ids),
        apply_zscore(matrix.scores, mean, std),
        True,
        mean,
        std,
    )


def apply_pathway_normalization(matrix, mean, std):
    """Normalize held-out rows with statistics stored from training."""
    return PathwayMatrix(
        list(matrix.subject_ids),
        list(matrix.pathway_ids),
        apply_zscore(matrix.scores, mean, std),
        True,
        mean,
        std,
    )


class FeatureBuilder:
    """Builds the pathway matrix from genotype-level inputs.

    The SNP/gene/pathway maps are fixed at construction; only the dosage
    imputation depends on which subjects count as training data.
    """

    def __init__(self, genotypes, gwas, genes, pathways, window_kb=DEFAULT_WINDOW_KB):
        self.genotypes = genotypes
        self.gwas = gwas
        self.report = DropReport()
        self.snp_map = build_snp_gene_map(genotypes.snps, genes, window_kb)
        probe = gene_scores(
            genotypes.subset([]), gwas, self.snp_map, np.zeros(len(genotypes.snps)), self.report
        )
        self.gp_map = build_gene_pathway_map(pathways, probe.gene_symbols, self.report)

    @property
    def pathway_ids(self):
        return list(self.gp_map.pathway_ids)

    def build(self, train_idx=None):
        means = impute_means(self.genotypes, train_idx)
        genes = gene_scores(self.genotypes, self.gwas, self.snp_map, means)
        return pathway_scores(genes, self.gp_map)


class PrecomputedFeatures:
    """Adapter so a loaded pathway matrix can stand in for a FeatureBuilder."""

    def __init__(self, matrix):
        self.matrix = matrix
        self.report = DropReport()

    @property
    def pathway_ids(self):
        return list(self.matrix.pathway_ids)

    def build(self, train_idx=None):
        return self.matrix


def write_pathway_matrix(matrix, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(["subject_id"] + list(matrix.pathway_ids)) + "\n")
        for sid, row in zip(matrix.subject_ids, matrix.scores):
            fh.write("\t".join([sid] + [repr(float(v)) for v in row]) + "\n")


def read_pathway_matrix(path):
    ids, rows = [], []
    with open(path, encoding="utf-8-sig", newline=None) as fh:
        header = fh.readline().rstrip("\n").rstrip("\r").split("\t")
        if not header or header[0] != "subject_id":
            raise MalformedLine("expected header starting with 'subject_id'", path, 1)
        for line_no, raw in enumerate(fh, start=2):
            text = raw.rstrip("\n").rstrip("\r")
            if not text.strip():
                continue
            fields = text.split("\t")
            if len(fields) != len(header):
                raise MalformedLine(
                    f"expected {len(header)} fields, got {len(fields)}", path, line_no
                )
            try:
                row = [float(v) for v in fields[1:]]
            except ValueError:
                raise MalformedValue("non-numeric pathway score", path, line_no) from None
            if not all(math.isfinite(v) for v in row):
                raise MalformedValue("non-finite pathway score", path, line_no)
            ids.append(fields[0])
            rows.append(row)
    scores = np.array(rows, dtype=np.float64).reshape(len(ids), len(header) - 1)
    return PathwayMatrix(ids, header[1:], scores)
