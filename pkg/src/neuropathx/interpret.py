"""Group-level reading of test-fold attention matrices.

Rows of an attention matrix are pathways and columns ROIs. A pathway's
influence is its row sum in the group-mean matrix. Rankings break ties by
identifier so exports are byte-stable.
"""

import csv
import json
import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, GroupEmpty, IoError, MalformedLine, MalformedValue

GROUPS = ("PAT", "NC")


@dataclass
class GroupAttention:
    pathway_ids: list
    roi_labels: list
    mean: dict  # group -> (N_P, N_I) array
    counts: dict


@dataclass
class AssociationSet:
    groups: list = field(default_factory=lambda: list(GROUPS))
    pathway_influence: dict = field(default_factory=dict)
    top_pathways: dict = field(default_factory=dict)
    intersection: list = field(default_factory=list)
    top_rois: dict = field(default_factory=dict)
    edges: list = field(default_factory=list)

    def to_dict(self):
        return {
            "groups": list(self.groups),
            "pathway_influence": self.pathway_influence,
            "top_pathways": self.top_pathways,
            "intersection": list(self.intersection),
            "top_rois": self.top_rois,
            "edges": self.edges,
        }


def read_attention(path):
    """Read one ``attn/<fold>/<subject>.tsv`` file -> (pathway_ids, roi_labels, matrix)."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n").rstrip("\r") for ln in fh if ln.strip()]
    if not lines:
        raise MalformedLine("empty attention file", path, 1)
    header = lines[0].split("\t")
    if header[0] != "pathway_id":
        raise MalformedLine("expected header starting with 'pathway_id'", path, 1)
    ids, rows = [], []
    for i, text in enumerate(lines[1:], start=2):
        parts = text.split("\t")
        if len(parts) != len(header):
            raise MalformedLine(f"expected {len(header)} fields, got {len(parts)}", path, i)
        try:
            rows.append([float(v) for v in parts[1:]])
        except ValueError:
            raise MalformedValue("non-numeric attention entry", path, i) from None
        ids.append(parts[0])
    return ids, header[1:], np.array(rows, dtype=np.float64).reshape(len(ids), len(header) - 1)


def group_mean_attention(matrices, labels, pathway_ids, roi_labels):
    """Elementwise mean per group of per-subject matrices.

    ``matrices`` maps subject id -> (N_P, N_I) array; ``labels`` maps
    subject id -> 0/1. Subjects without a label are skipped.
    """
    sums = {g: np.zeros((len(pathway_ids), len(roi_labels))) for g in GROUPS}
    counts = {g: 0 for g in GROUPS}
    for sid in sorted(matrices):
        if sid not in labels:
            continue
        g = "PAT" if int(labels[sid]) == 1 else "NC"
        sums[g] += matrices[sid]
        counts[g] += 1
    for g in GROUPS:
        if counts[g] == 0:
            raise GroupEmpty(f"no {g} subject among the attention matrices")
    return GroupAttention(
        list(pathway_ids), list(roi_labels), {g: sums[g] / counts[g] for g in GROUPS}, counts
    )


def mean_attention(attn_dir, labels):
    """Group means over every ``<attn_dir>/<fold>/<subject>.tsv`` file.

    ``labels`` is a :class:`~neuropathx.genio.LabelTable` or a mapping.
    """
    if hasattr(labels, "subject_ids"):
        labels = dict(zip(labels.subject_ids, (int(v) for v in labels.labels)))
    matrices, pathway_ids, roi_labels = {}, None, None
    for root, dirs, files in os.walk(attn_dir):
        dirs.sort()
        for name in sorted(files):
            if not name.endswith(".tsv"):
                continue
            path = os.path.join(root, name)
            pids, rois, mat = read_attention(path)
            if pathway_ids is None:
                pathway_ids, roi_labels = pids, rois
            elif pids != pathway_ids or rois != roi_labels:
                raise MalformedLine("pathway/ROI layout differs from other files", path, 1)
            sid = name[: -len(".tsv")]
            if sid in matrices:
                warnings.warn(f"subject {sid} appears in more than one fold; using the last")
            matrices[sid] = mat
    if not matrices:
        raise GroupEmpty(f"no attention files under {attn_dir}")
    return group_mean_attention(matrices, labels, pathway_ids, roi_labels)


def pathway_influence(a_bar):
    """Row sums: one influence value per pathway."""
    return np.asarray(a_bar, dtype=np.float64).sum(axis=1)


def _top(values, names, k):
    order = sorted(range(len(names)), key=lambda i: (-values[i], names[i]))
    return [names[i] for i in order[:k]]


def top_associations(ga, k_path=7, k_roi=4):
    """Top pathways and ROIs per group, their intersection and weighted edges.

    Pathways rank by influence, ROIs by their largest entry in the group-mean
    matrix. Edges join each intersection pathway to each of the group's top
    ROIs, weighted by the group-mean attention at that cell.
    """
    n_p, n_i = len(ga.pathway_ids), len(ga.roi_labels)
    if not 1 <= k_path <= n_p:
        raise ConfigError(f"k_path={k_path} must lie in [1, {n_p}]")
    if not 1 <= k_roi <= n_i:
        raise ConfigError(f"k_roi={k_roi} must lie in [1, {n_i}]")
    pidx = {p: i for i, p in enumerate(ga.pathway_ids)}
    ridx = {r: j for j, r in enumerate(ga.roi_labels)}
    out = AssociationSet()
    for g in GROUPS:
        infl = pathway_influence(ga.mean[g])
        out.pathway_influence[g] = {p: float(infl[i]) for i, p in enumerate(ga.pathway_ids)}
        out.top_pathways[g] = _top(infl, ga.pathway_ids, k_path)
        roi_peak = ga.mean[g].max(axis=0)
        out.top_rois[g] = _top(roi_peak, ga.roi_labels, k_roi)
    out.intersection = sorted(set(out.top_pathways["PAT"]) & set(out.top_pathways["NC"]))
    for g in GROUPS:
        for p in out.intersection:
            for r in out.top_rois[g]:
                out.edges.append(
                    {"pathway": p, "roi": r, "group": g, "weight": float(ga.mean[g][pidx[p], ridx[r]])}
                )
    return out


# -- export -----------------------------------------------------------------------


def _json(obj, indent=0):
    pad, inner = "  " * indent, "  " * (indent + 1)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f'{inner}{_json(str(k))}: {_json(v, indent + 1)}' for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        return "[\n" + ",\n".join(inner + _json(v, indent + 1) for v in obj) + "\n" + pad + "]"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, bool) or obj is None:
        return {True: "true", False: "false", None: "null"}[obj]
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    x = float(obj)
    if not math.isfinite(x):
        raise ValueError("non-finite value in association export")
    return format(x, ".17g")


def export_associations(assoc, out_dir, svg=False):
    """Write associations.json and associations.csv (and a chord-style SVG)."""
    try:
        os.makedirs(out_dir, exist_ok=True)
        paths = {
            "json": os.path.join(out_dir, "associations.json"),
            "csv": os.path.join(out_dir, "associations.csv"),
        }
        with open(paths["json"], "w", encoding="utf-8", newline="\n") as fh:
            fh.write(_json(assoc.to_dict()) + "\n")
        with open(paths["csv"], "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["pathway_id", "roi_label", "group", "weight"])
            for e in assoc.edges:
                w.writerow([e["pathway"], e["roi"], e["group"], format(e["weight"], ".17g")])
        if svg:
            paths["svg"] = os.path.join(out_dir, "associations.svg")
            with open(paths["svg"], "w", encoding="utf-8", newline="\n") as fh:
                fh.write(render_svg(assoc))
    except OSError as exc:
        raise IoError(f"cannot write associations to {out_dir}: {exc}") from exc
    return paths


def load_associations(path):
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    return AssociationSet(
        raw["groups"],
        {g: {p: float(v) for p, v in d.items()} for g, d in raw["pathway_influence"].items()},
        raw["top_pathways"],
        raw["intersection"],
        raw["top_rois"],
        [{**e, "weight": float(e["weight"])} for e in raw["edges"]],
    )


_COLORS = {"PAT": "#7b3294", "NC": "#e6b800"}


def render_svg(assoc, size=600):
    """Pathways on the upper arc, ROIs on the lower arc, group-colored chords."""
    from xml.sax.saxutils import escape

    c, radius = size / 2.0, size / 2.0 - 90
    pathways = list(assoc.intersection)
    rois = sorted({e["roi"] for e in assoc.edges})

    def place(names, lo, hi):
        out = {}
        for i, n in enumerate(names):
            t = lo + (hi - lo) * (i + 1) / (len(names) + 1)
            out[n] = (c + radius * math.cos(t), c - radius * math.sin(t))
        return out

    pos = {**place(pathways, math.pi, 0.0), **place(rois, math.pi, 2 * math.pi)}
    wmax = max((e["weight"] for e in assoc.edges), default=1.0) or 1.0
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<circle cx="{c:.1f}" cy="{c:.1f}" r="{radius:.1f}" fill="none" stroke="#cccccc"/>',
    ]
    for e in assoc.edges:
        (x1, y1), (x2, y2) = pos[e["pathway"]], pos[e["roi"]]
        width = 0.5 + 4.0 * e["weight"] / wmax
        parts.append(
            f'<path d="M {x1:.1f} {y1:.1f} Q {c:.1f} {c:.1f} {x2:.1f} {y2:.1f}" fill="none" '
            f'stroke="{_COLORS.get(e["group"], "#333333")}" stroke-width="{width:.2f}" '
            f'stroke-opacity="0.7"/>'
        )
    for name, (x, y) in pos.items():
        parts.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="4" fill="#333333"/>')
        anchor = "end" if x < c else "start"
        dx = -8 if x < c else 8
        parts.append(
            f'<text x="{x + dx:.1f}" y="{y:.1f}" font-size="11" text-anchor="{anchor}">'
            f"{escape(name)}</text>"
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
