"""Synthetic cohorts with planted pathway and ROI signal.

Genes sit on one synthetic chromosome, spaced far enough apart that the
50 kb window gives each gene its own block of SNPs. Only SNPs inside genes
of the causal pathways carry nonzero effect sizes. A subject's liability is
``effect_strength * sum(z-scored causal pathway scores) + noise``; the upper
half of liabilities are patients. Causal ROIs are shifted by
``effect_strength * liability`` in standardized units; other ROIs are noise.
"""

import json
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import genio
from .errors import ConfigError

FEATURE_NAMES = ("volume", "surface_area", "thickness_mean", "thickness_std")
# per-feature baseline and spread of the raw (unnormalized) imaging values
_FEATURE_LOC = np.array([2500.0, 1000.0, 2.5, 0.6])
_FEATURE_SCALE = np.array([400.0, 150.0, 0.3, 0.1])


@dataclass
class SynthSpec:
    n_subjects: int = 200
    n_snps: int = 2000
    n_genes: int = 200
    n_pathways: int = 40
    n_rois: int = 30
    d: int = 4
    n_causal_pathways: int = 3
    n_causal_rois: int = 4
    effect_strength: float = 1.0
    noise_sd: float = 1.0
    seed: int = 0
    n_excluded_pathways: int = 2
    gene_length: int = 10_000
    gene_spacing: int = 200_000
    chrom_length: int = 250_000_000

    def validate(self):
        if self.n_subjects < 2:
            raise ConfigError("n_subjects must be >= 2")
        if self.n_genes < self.n_pathways:
            raise ConfigError("need at least one gene per pathway")
        if self.n_snps < self.n_genes:
            raise ConfigError("need at least one SNP per gene")
        if not 0 < self.n_causal_pathways <= self.n_pathways:
            raise ConfigError("n_causal_pathways must be in [1, n_pathways]")
        if not 0 < self.n_causal_rois <= self.n_rois:
            raise ConfigError("n_causal_rois must be in [1, n_rois]")
        if self.effect_strength < 0:
            raise ConfigError("effect_strength must be >= 0")
        if self.noise_sd <= 0:
            raise ConfigError("noise_sd must be > 0")
        if self.gene_spacing < self.gene_length + 50_000 + 1:
            raise ConfigError("gene_spacing too small to keep 50 kb windows disjoint")
        last_end = 100_000 + (self.n_genes - 1) * self.gene_spacing + self.gene_length
        if last_end + 50_000 > self.chrom_length:
            raise ConfigError(
                f"{self.n_genes} genes at spacing {self.gene_spacing} overflow the "
                f"{self.chrom_length} bp chromosome"
            )

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class GroundTruth:
    causal_pathways: list
    causal_rois: list
    liability: dict
    causal_pathway_scores: dict

    def to_dict(self):
        return asdict(self)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls(
            raw["causal_pathways"], raw["causal_rois"], raw["liability"], raw["causal_pathway_scores"]
        )


@dataclass
class SynthCohort:
    genotypes: genio.GenotypeTable
    gwas: list
    genes: list
    pathways: list
    exclusions: set
    imaging: genio.ImagingTable
    labels: genio.LabelTable
    truth: GroundTruth
    spec: SynthSpec


def _zscore(x):
    sd = x.std()
    return (x - x.mean()) / sd if sd > 0 else np.zeros_like(x)


def generate(spec):
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = spec.n_subjects
    subject_ids = [f"S{i + 1:04d}" for i in range(n)]
    roi_labels = [f"ROI{j + 1:02d}" for j in range(spec.n_rois)]

    maf = rng.uniform(0.05, 0.5, size=spec.n_snps)
    dosages = rng.binomial(2, maf, size=(n, spec.n_snps)).astype(np.float64)

    genes, snps = [], []
    blocks = np.array_split(np.arange(spec.n_snps), spec.n_genes)
    for i, block in enumerate(blocks):
        start = 100_000 + i * spec.gene_spacing
        end = start + spec.gene_length - 1
        genes.append(genio.GeneRecord(f"GENE{i + 1:04d}", "1", start, end))
        step = spec.gene_length // (len(block) + 1)
        for t, j in enumerate(block):
            snps.append(genio.SnpRecord(f"rs{j + 1}", "1", start + (t + 1) * step))

    gene_order = rng.permutation(spec.n_genes)
    members = np.array_split(gene_order, spec.n_pathways)
    pathway_ids = [f"PW{k + 1:03d}" for k in range(spec.n_pathways)]
    causal = np.sort(rng.choice(spec.n_pathways, spec.n_causal_pathways, replace=False))

    betas = np.zeros(spec.n_snps)
    for k in causal:
        for g in members[k]:
            block = blocks[g]
            # scaled so that effect_strength = 0 leaves no trace of the causal set in the data
            betas[block] = spec.effect_strength * rng.normal(0.0, 1.0, size=len(block))
    gene_scores = np.stack([dosages[:, b] @ betas[b] for b in blocks], axis=1)
    path_scores = np.stack([gene_scores[:, members[k]].sum(axis=1) for k in causal], axis=1)

    signal = sum(_zscore(path_scores[:, c]) for c in range(len(causal)))
    liability = spec.effect_strength * signal + spec.noise_sd * rng.normal(size=n)
    order = np.argsort(-liability, kind="mergesort")
    labels = np.zeros(n, dtype=np.int64)
    labels[order[: n // 2]] = 1

    causal_rois = np.sort(rng.choice(spec.n_rois, spec.n_causal_rois, replace=False))
    z = rng.normal(size=(n, spec.n_rois, spec.d))
    z[:, causal_rois, :] += spec.effect_strength * liability[:, None, None]
    loc = np.resize(_FEATURE_LOC, spec.d)
    scale = np.resize(_FEATURE_SCALE, spec.d)
    features = loc + scale * z
    feature_names = [
        FEATURE_NAMES[i] if i < len(FEATURE_NAMES) else f"feat_{i + 1}" for i in range(spec.d)
    ]

    pathways = [
        genio.PathwayDef(
            pid, f"synthetic pathway {k + 1}", tuple(genes[g].gene_symbol for g in members[k])
        )
        for k, pid in enumerate(pathway_ids)
    ]
    exclusions = set()
    for x in range(spec.n_excluded_pathways):
        pid = f"PWX{x + 1:02d}"
        pick = rng.choice(spec.n_genes, size=min(5, spec.n_genes), replace=False)
        pathways.append(
            genio.PathwayDef(pid, "excluded decoy", tuple(genes[g].gene_symbol for g in pick))
        )
        exclusions.add(pid)

    truth = GroundTruth(
        [pathway_ids[k] for k in causal],
        [roi_labels[j] for j in causal_rois],
        {sid: float(v) for sid, v in zip(subject_ids, liability)},
        {
            pathway_ids[k]: [float(v) for v in path_scores[:, c]]
            for c, k in enumerate(causal)
        },
    )
    return SynthCohort(
        genio.GenotypeTable(subject_ids, snps, dosages),
        [genio.GwasRecord(s.snp_id, s.chrom, s.pos, float(b)) for s, b in zip(snps, betas)],
        genes,
        pathways,
        exclusions,
        genio.ImagingTable(subject_ids, roi_labels, features, feature_names),
        genio.LabelTable(subject_ids, labels),
        truth,
        spec,
    )


SYNTH_FILES = {
    "genotypes": "genotypes.tsv",
    "gwas": "gwas.tsv",
    "genes": "genes.tsv",
    "gmt": "pathways.gmt",
    "exclude": "exclusions.txt",
    "imaging": "imaging.csv",
    "labels": "labels.csv",
    "truth": "ground_truth.json",
}


def write_cohort(cohort, out_dir):
    """Write the seven input files plus ground_truth.json; returns their paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {k: os.path.join(out_dir, v) for k, v in SYNTH_FILES.items()}
    genio.write_genotypes(cohort.genotypes, paths["genotypes"])
    genio.write_gwas(cohort.gwas, paths["gwas"])
    genio.write_genes(cohort.genes, paths["genes"])
    genio.write_gmt(cohort.pathways, paths["gmt"])
    genio.write_exclusions(cohort.exclusions, paths["exclude"])
    genio.write_imaging(cohort.imaging, paths["imaging"])
    genio.write_labels(cohort.labels, paths["labels"])
    with open(paths["truth"], "w", encoding="utf-8", newline="\n") as fh:
        json.dump({**cohort.truth.to_dict(), "spec": asdict(cohort.spec)}, fh, indent=2)
        fh.write("\n")
    return paths


@dataclass
class RecoveryScore:
    pathways: float
    rois: float


def recovery_score(assoc, truth):
    """Fraction of planted pathways in the top-k intersection, and of planted
    ROIs among the union of both groups' top ROIs."""
    causal_p = set(truth.causal_pathways)
    causal_r = set(truth.causal_rois)
    top_r = set()
    for rois in assoc.top_rois.values():
        top_r.update(rois)
    return RecoveryScore(
        len(set(assoc.intersection) & causal_p) / len(causal_p) if causal_p else 0.0,
        len(top_r & causal_r) / len(causal_r) if causal_r else 0.0,
    )
