"""Post-training analysis: magnitude pruning of units, |w|-weighted
displacement distributions, effective receptive fields, and the theoretical
speed-up estimator for the blur-and-shift path."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import DAULayer
from .train import evaluate, format_float


class AnalysisError(ValueError):
    pass


# ---------------------------------------------------------------------------
# pruning
# ---------------------------------------------------------------------------

@dataclass
class PruneLayerRow:
    layer: str
    units_before: int
    units_after: int

    @property
    def removed_fraction(self):
        if self.units_before == 0:
            return 0.0
        return 1.0 - self.units_after / self.units_before


@dataclass
class PruneReport:
    threshold: float
    scope: str
    rows: list
    accuracy_before: float = None
    accuracy_after: float = None

    @property
    def units_before(self):
        return sum(r.units_before for r in self.rows)

    @property
    def units_after(self):
        return sum(r.units_after for r in self.rows)

    @property
    def removed_fraction(self):
        if self.units_before == 0:
            return 0.0
        return 1.0 - self.units_after / self.units_before


def prune(network, rel_threshold, scope="per_layer", bundle=None):
    """Deactivate units whose |w| falls below rel_threshold times the largest
    |w| (per layer by default, or over all layers with scope="global").

    Removed units get weight 0 and their active flag cleared, which excludes
    them from unit counts and from the blur-and-shift gather. Mutates the
    network in place and returns a PruneReport.
    """
    if not 0.0 <= rel_threshold <= 1.0:
        raise AnalysisError("relative threshold must lie in [0, 1]")
    if scope not in ("per_layer", "global"):
        raise AnalysisError(f"unknown scope {scope!r}")
    dau = network.dau_layers()
    if not dau:
        raise AnalysisError("network has no aggregation-unit layers")

    accuracy_before = None
    if bundle is not None:
        accuracy_before, _ = evaluate(network, bundle.test)

    global_max = max((np.abs(l.params.w[l.params.active]).max(initial=0.0)
                      for _, l in dau), default=0.0)
    rows = []
    for _, layer in dau:
        p = layer.params
        before = int(p.active.sum())
        ref = global_max if scope == "global" else \
            np.abs(p.w[p.active]).max(initial=0.0)
        cut = rel_threshold * ref
        remove = p.active & (np.abs(p.w) < cut)
        p.w[remove] = 0.0
        p.active[remove] = False
        rows.append(PruneLayerRow(layer.name, before, int(p.active.sum())))

    accuracy_after = None
    if bundle is not None:
        accuracy_after, _ = evaluate(network, bundle.test)
    return PruneReport(rel_threshold, scope, rows, accuracy_before, accuracy_after)


def write_prune_report(report, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("layer,threshold,units_before,units_after,removed_fraction,"
                 "accuracy_before,accuracy_after\n")
        acc_b = "" if report.accuracy_before is None else format_float(report.accuracy_before)
        acc_a = "" if report.accuracy_after is None else format_float(report.accuracy_after)
        for r in report.rows:
            fh.write(f"{r.layer},{format_float(report.threshold)},{r.units_before},"
                     f"{r.units_after},{format_float(r.removed_fraction)},,\n")
        fh.write(f"total,{format_float(report.threshold)},{report.units_before},"
                 f"{report.units_after},{format_float(report.removed_fraction)},"
                 f"{acc_b},{acc_a}\n")


# ---------------------------------------------------------------------------
# displacement distributions
# ---------------------------------------------------------------------------

@dataclass
class DisplacementHistogram:
    kind: str                  # "radial_1d" | "planar_2d"
    top_fraction: float
    bin_edges: np.ndarray      # 1-D: (nbins+1,); 2-D: (nbins+1,) per axis
    mass: np.ndarray           # 1-D: (nbins,); 2-D: (nbins, nbins)


def _select_units(params, top_fraction):
    active = params.active
    if not active.any():
        raise AnalysisError("no active units to histogram")
    w = np.abs(params.w)
    if top_fraction >= 1.0:
        keep = active.copy()
    else:
        keep = active & (w >= top_fraction * w[active].max())
    if not keep.any():
        raise AnalysisError(f"no units pass the top-{top_fraction} filter")
    return keep


def displacement_histograms(params, max_displacement, top_fraction=1.0,
                            kind="radial_1d", n_bins=24):
    """|w|-weighted distribution of unit displacements.

    top_fraction keeps units whose |w| reaches that fraction of the layer's
    largest |w|; 1.0 keeps every active unit. Radial histograms bin the
    distance to the filter center on [0, sqrt(2)*max_displacement]; planar
    ones bin (dy, dx) on the clamp box. Masses normalize to 1.
    """
    keep = _select_units(params, top_fraction)
    w = np.abs(params.w[keep])
    mu = params.mu[keep]
    total = w.sum()
    if total == 0.0:
        raise AnalysisError("selected units carry zero weight mass")
    if kind == "radial_1d":
        edges = np.linspace(0.0, np.sqrt(2.0) * max_displacement, n_bins + 1)
        radii = np.linalg.norm(mu, axis=-1)
        mass, _ = np.histogram(radii, bins=edges, weights=w)
    elif kind == "planar_2d":
        edges = np.linspace(-max_displacement, max_displacement, n_bins + 1)
        mass, _, _ = np.histogram2d(mu[:, 0], mu[:, 1], bins=(edges, edges),
                                    weights=w)
    else:
        raise AnalysisError(f"unknown histogram kind {kind!r}")
    return DisplacementHistogram(kind, top_fraction, edges, mass / total)


def write_histogram(hist, path):
    with open(path, "w", encoding="utf-8") as fh:
        if hist.kind == "radial_1d":
            fh.write("bin_lo,bin_hi,mass\n")
            for i in range(hist.mass.shape[0]):
                fh.write(f"{format_float(hist.bin_edges[i])},"
                         f"{format_float(hist.bin_edges[i + 1])},"
                         f"{format_float(hist.mass[i])}\n")
        else:
            fh.write("y_lo,y_hi,x_lo,x_hi,mass\n")
            e = hist.bin_edges
            for i in range(hist.mass.shape[0]):
                for j in range(hist.mass.shape[1]):
                    fh.write(f"{format_float(e[i])},{format_float(e[i + 1])},"
                             f"{format_float(e[j])},{format_float(e[j + 1])},"
                             f"{format_float(hist.mass[i, j])}\n")


# ---------------------------------------------------------------------------
# effective receptive field
# ---------------------------------------------------------------------------

ERF_LEVELS = (0.25, 0.75, 0.999)


@dataclass
class ERFMap:
    layer_index: int
    grid: np.ndarray                      # (H, W), non-negative, sums to 1
    levels: dict = field(default_factory=dict)   # fraction -> boolean mask


def compute_erf(network, layer_index, probe_input, levels=ERF_LEVELS):
    """Influence of input pixels on the chosen layer's center output pixel.

    For each output channel, a one-hot gradient is planted at the center pixel
    of that channel and backpropagated to the input; absolute input gradients
    accumulate over output channels, average over input channels, and
    normalize to a unit-mass grid. Level sets are the smallest cell sets
    holding each cumulative-influence fraction.
    """
    if not 0 <= layer_index < len(network.layers):
        raise AnalysisError(f"layer index {layer_index} out of range")
    out = network.forward_partial(probe_input, layer_index, train=False)
    if out.ndim != 4:
        raise AnalysisError("chosen layer has no spatial output")
    n, c, h, w = out.shape
    acc = np.zeros(probe_input.shape, dtype=np.float64)
    for ch in range(c):
        seed_grad = np.zeros_like(out)
        seed_grad[:, ch, h // 2, w // 2] = 1.0
        grad_in = network.backward_partial(seed_grad, layer_index)
        acc += np.abs(grad_in)
    grid = acc.mean(axis=(0, 1))
    total = grid.sum()
    if total == 0.0:
        raise AnalysisError("probe produced an all-zero influence grid")
    grid = grid / total
    order = np.argsort(grid.ravel())[::-1]
    csum = np.cumsum(grid.ravel()[order])
    level_masks = {}
    for frac in levels:
        count = int(np.searchsorted(csum, frac) + 1)
        mask = np.zeros(grid.size, dtype=bool)
        mask[order[:count]] = True
        level_masks[frac] = mask.reshape(grid.shape)
    return ERFMap(layer_index, grid, level_masks)


def write_erf(erf, grid_path, levels_path, svg_path=None):
    np.savetxt(grid_path, erf.grid, delimiter=",", fmt="%.9g")
    with open(levels_path, "w", encoding="utf-8") as fh:
        fh.write("level,cell_count,area_fraction\n")
        for frac in sorted(erf.levels):
            mask = erf.levels[frac]
            fh.write(f"{format_float(frac)},{int(mask.sum())},"
                     f"{format_float(mask.mean())}\n")
    if svg_path:
        write_erf_svg(erf, svg_path)


def write_erf_svg(erf, path, cell=8):
    """Grayscale influence grid with one contour rectangle set per level."""
    h, w = erf.grid.shape
    peak = erf.grid.max()
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" '
             f'width="{w * cell}" height="{h * cell}">']
    for y in range(h):
        for x in range(w):
            v = erf.grid[y, x] / peak if peak > 0 else 0.0
            shade = int(255 * (1.0 - v))
            parts.append(f'<rect x="{x * cell}" y="{y * cell}" width="{cell}" '
                         f'height="{cell}" fill="rgb({shade},{shade},{shade})"/>')
    colors = {0.25: "#e6b800", 0.75: "#cc4400", 0.999: "#3355cc"}
    for frac in sorted(erf.levels):
        color = colors.get(frac, "#000000")
        ys, xs = np.nonzero(erf.levels[frac])
        for y, x in zip(ys, xs):
            parts.append(f'<rect x="{x * cell}" y="{y * cell}" width="{cell}" '
                         f'height="{cell}" fill="none" stroke="{color}" '
                         f'stroke-width="1"/>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts))


# ---------------------------------------------------------------------------
# cost model
# ---------------------------------------------------------------------------

def speedup_estimate(kernel_w, kernel_h, units):
    """Theoretical speed-up of the blur-and-shift path over a standard
    convolution with the equivalent kernel footprint: Kw*Kh / (4*K), the 4
    being the bilinear taps per unit."""
    if kernel_w <= 0 or kernel_h <= 0 or units <= 0:
        raise AnalysisError("all cost-model inputs must be positive")
    return (kernel_w * kernel_h) / (4.0 * units)
