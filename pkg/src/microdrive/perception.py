"""BEV perception stack producing structured environment tokens.

Six synthetic camera views are rasterized from ground-truth geometry and
encoded by a small convolutional stack. View features are lifted onto a
bird's-eye grid (geometry scatter plus learned refinement), a global scene
sampler pools each view to a coarse grid of tokens, and two query
transformers cross-attend to BEV cells to produce agent tokens (score, box,
class per query) and map tokens with per-class segmentation masks. Training
uses focal classification and L1 box regression under Hungarian matching
plus mask BCE with a soft IoU term.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .world import AGENT_CLASSES, to_ego_frame, wrap_angle

MAP_MASK_CLASSES = ["lane_divider", "crosswalk", "boundary", "drivable"]


@dataclass
class PerceptionConfig:
    d_model: int = 64
    n_views: int = 6
    view_height: int = 12
    view_width: int = 20
    view_channels: int = 16
    view_range_m: float = 30.0
    pool_hw: tuple = (3, 5)
    bev_resolution: int = 64
    bev_extent_m: float = 25.6
    n_agent_queries: int = 16
    n_map_queries: int = 8
    n_decoder_layers: int = 2
    n_heads: int = 4
    score_threshold: float = 0.4
    max_agents: int = 8
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    map_loss_weight: float = 1.0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ValueError("score_threshold must be in [0, 1]")

    @property
    def n_scene_tokens(self):
        return self.n_views * self.pool_hw[0] * self.pool_hw[1]


# raster input channels: one per agent class, a lane channel, an ambience channel
N_RASTER_CHANNELS = len(AGENT_CLASSES) + 2


@dataclass
class ViewFeatures:
    tensor: torch.Tensor        # (n_views, C, H_v, W_v)


@dataclass
class BEVGrid:
    tensor: torch.Tensor        # (C, G, G)
    extent_m: float


@dataclass
class AgentTokenSet:
    tokens: torch.Tensor        # (N, D)
    scores: torch.Tensor        # (N,)
    boxes: torch.Tensor         # (N, 5) as (x, y, length, width, yaw), ego frame
    classes: torch.Tensor       # (N,) class indices


@dataclass
class MapTokenSet:
    tokens: torch.Tensor        # (N_m, D)
    seg_logits: torch.Tensor    # (n_mask_classes, G, G)


@dataclass
class EnvTokens:
    scene: torch.Tensor         # (N_s, D)
    agents: AgentTokenSet
    map: MapTokenSet


# --- ground-truth rasterization ----------------------------------------------


def _grid_index(x, y, extent, resolution):
    """Ego-frame meters -> (row, col); row grows with +Y (forward)."""
    cell = 2.0 * extent / resolution
    col = int(math.floor((x + extent) / cell))
    row = int(math.floor((y + extent) / cell))
    return row, col


def _fill_polygon(mask, poly_rc):
    """Even-odd fill of a polygon given in (row, col) float coordinates."""
    g = mask.shape[0]
    rows, cols = np.meshgrid(np.arange(g) + 0.5, np.arange(g) + 0.5,
                             indexing="ij")
    inside = np.zeros_like(mask, dtype=bool)
    n = len(poly_rc)
    for i in range(n):
        r1, c1 = poly_rc[i]
        r2, c2 = poly_rc[(i + 1) % n]
        if r1 == r2:
            continue
        crosses = (r1 > rows) != (r2 > rows)
        with np.errstate(divide="ignore", invalid="ignore"):
            ci = c1 + (rows - r1) * (c2 - c1) / (r2 - r1)
        inside ^= crosses & (cols < ci)
    mask[inside] = 1.0


def _draw_polyline(mask, pts_rc, step=0.4):
    g = mask.shape[0]
    for (r1, c1), (r2, c2) in zip(pts_rc[:-1], pts_rc[1:]):
        length = math.hypot(r2 - r1, c2 - c1)
        n = max(2, int(length / step) + 1)
        for t in np.linspace(0.0, 1.0, n):
            r = int(r1 + t * (r2 - r1))
            c = int(c1 + t * (c2 - c1))
            if 0 <= r < g and 0 <= c < g:
                mask[r, c] = 1.0


def _to_grid_coords(frame, pts, extent, resolution):
    cell = 2.0 * extent / resolution
    out = []
    for p in pts:
        x, y = to_ego_frame(frame.ego.pose, p)
        out.append(((y + extent) / cell, (x + extent) / cell))
    return out


def bev_occupancy(frame, config):
    """Ego-centric occupancy raster, one channel per agent class plus lanes.

    Returns a float array (len(AGENT_CLASSES) + 1, G, G). Agent footprints
    are filled as oriented rectangles; the last channel marks lane
    centerlines.
    """
    g = config.bev_resolution
    extent = config.bev_extent_m
    occ = np.zeros((len(AGENT_CLASSES) + 1, g, g), dtype=np.float32)
    for a in frame.agents:
        ci = AGENT_CLASSES.index(a.cls)
        corners = _box_corners_world(a.pose, a.size)
        _fill_polygon(occ[ci], _to_grid_coords(frame, corners, extent, g))
    for lane in frame.lane_graph.lanes:
        _draw_polyline(occ[-1], _to_grid_coords(frame, lane, extent, g))
    return occ


def _box_corners_world(pose, size):
    x, y, yaw = pose
    l, w = size[0] / 2.0, size[1] / 2.0
    cy, sy = math.cos(yaw), math.sin(yaw)
    out = []
    for dx, dy in ((l, w), (l, -w), (-l, -w), (-l, w)):
        out.append((x + dx * cy - dy * sy, y + dx * sy + dy * cy))
    return out


def ground_truth_masks(frame, config):
    """Per-class map masks (lane divider, crosswalk, boundary, drivable)."""
    g = config.bev_resolution
    extent = config.bev_extent_m
    masks = np.zeros((len(MAP_MASK_CLASSES), g, g), dtype=np.float32)
    lg = frame.lane_graph
    span = 1.5 * extent
    dividers = [np.array([[0.0, -span], [0.0, span]])]
    if lg.is_intersection:
        dividers.append(np.array([[-span, 0.0], [span, 0.0]]))
    for div in dividers:
        _draw_polyline(masks[0], _to_grid_coords(frame, div, extent, g))
    for cw in lg.crosswalks:
        _fill_polygon(masks[1], _to_grid_coords(frame, cw, extent, g))
    for b in lg.boundaries:
        _draw_polyline(masks[2], _to_grid_coords(frame, b, extent, g))
    for poly in lg.drivable_area:
        _fill_polygon(masks[3], _to_grid_coords(frame, poly, extent, g))
    # the divider only exists on the road surface
    masks[0] *= masks[3]
    return masks


def view_sector(frame, point, n_views=6):
    """Index of the 60-degree camera sector containing a world point.

    Sector 0 is centered on the ego heading; sectors advance clockwise
    (to the ego's right).
    """
    x, y = to_ego_frame(frame.ego.pose, point)
    ang = math.atan2(x, y)  # 0 = straight ahead, positive to the right
    width = 2.0 * math.pi / n_views
    return int(math.floor((ang + width / 2.0) / width)) % n_views


def rasterize_views(frame, config):
    """Coarse semantic rasters for 6 synthetic camera sectors.

    Each view maps angle-within-sector to columns and distance to rows
    (near at the bottom row). Channels: one per agent class, lane points,
    and a constant ambience channel encoding (night, rain).
    """
    n, h, w = config.n_views, config.view_height, config.view_width
    raster = np.zeros((n, N_RASTER_CHANNELS, h, w), dtype=np.float32)
    width = 2.0 * math.pi / n

    def paint(channel, point):
        x, y = to_ego_frame(frame.ego.pose, point)
        dist = math.hypot(x, y)
        if dist < 1e-6 or dist >= config.view_range_m:
            return
        ang = math.atan2(x, y)
        v = int(math.floor((ang + width / 2.0) / width)) % n
        local = wrap_angle(ang - v * width)
        col = int((local / width + 0.5) * w)
        row = h - 1 - int(dist / config.view_range_m * h)
        col = min(max(col, 0), w - 1)
        row = min(max(row, 0), h - 1)
        raster[v, channel, row, col] = 1.0

    for a in frame.agents:
        paint(AGENT_CLASSES.index(a.cls), a.pose[:2])
    lane_ch = len(AGENT_CLASSES)
    for lane in frame.lane_graph.lanes:
        dense = _densify(lane, 1.0)
        for p in dense:
            paint(lane_ch, p)
    day, weather = frame.ambience
    ambience = 0.5 * (day != "day") + 0.5 * (weather != "clear")
    raster[:, -1, :, :] = ambience
    return raster


def _densify(polyline, step):
    pts = [polyline[0]]
    for a, b in zip(polyline[:-1], polyline[1:]):
        d = math.hypot(b[0] - a[0], b[1] - a[1])
        n = max(1, int(d / step))
        for t in np.linspace(0.0, 1.0, n + 1)[1:]:
            pts.append((a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])))
    return pts


# --- trainable blocks --------------------------------------------------------


class ViewEncoder(nn.Module):
    """Small convolutional stack standing in for a 2D image backbone."""

    def __init__(self, config):
        super().__init__()
        c = config.view_channels
        self.net = nn.Sequential(
            nn.Conv2d(N_RASTER_CHANNELS, c, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(c, c, 3, padding=1),
        )

    def forward(self, raster):
        return self.net(raster)


class BEVRefiner(nn.Module):
    """Learned refinement over the geometry-scatter BEV raster.

    Takes the occupancy raster concatenated with a broadcast summary of the
    view features so BEV-supervised losses reach the view encoder.
    """

    def __init__(self, config):
        super().__init__()
        in_ch = len(AGENT_CLASSES) + 1 + config.view_channels
        c = config.d_model
        self.net = nn.Sequential(
            nn.Conv2d(in_ch, c, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(c, c, 3, padding=1),
        )

    def forward(self, occupancy, view_features):
        summary = view_features.mean(dim=(0, 2, 3))
        g = occupancy.shape[-1]
        broadcast = summary[:, None, None].expand(-1, g, g)
        out = self.net(torch.cat([occupancy, broadcast], dim=0)[None])[0]
        # residual skip of the raw scatter channels keeps per-class
        # occupancy linearly readable downstream
        skip = torch.zeros_like(out)
        skip[:occupancy.shape[0]] = occupancy
        return out + skip


class SceneSampler(nn.Module):
    """Adaptive max pooling of each view to a coarse grid of scene tokens."""

    def __init__(self, config):
        super().__init__()
        self.pool_hw = config.pool_hw
        self.proj = nn.Linear(config.view_channels, config.d_model)

    def pooled(self, view_features):
        pooled = F.adaptive_max_pool2d(view_features, self.pool_hw)
        n, c = pooled.shape[0], pooled.shape[1]
        return pooled.permute(0, 2, 3, 1).reshape(n * self.pool_hw[0] * self.pool_hw[1], c)

    def forward(self, view_features):
        return self.proj(self.pooled(view_features))


class _DecoderLayer(nn.Module):
    def __init__(self, d, heads):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.ff = nn.Sequential(nn.Linear(d, 4 * d), nn.GELU(), nn.Linear(4 * d, d))
        self.n1 = nn.LayerNorm(d)
        self.n2 = nn.LayerNorm(d)
        self.n3 = nn.LayerNorm(d)

    def forward(self, q, memory):
        h = self.n1(q)
        q = q + self.self_attn(h, h, h, need_weights=False)[0]
        h = self.n2(q)
        attended, weights = self.cross_attn(h, memory, memory,
                                            need_weights=True,
                                            average_attn_weights=True)
        q = q + attended
        return q + self.ff(self.n3(q)), weights


class QueryDecoder(nn.Module):
    """Learnable queries cross-attending to flattened BEV cells."""

    def __init__(self, config, n_queries):
        super().__init__()
        d = config.d_model
        self.queries = nn.Parameter(torch.randn(n_queries, d) * 0.02)
        self.cell_pos = nn.Parameter(
            torch.randn(config.bev_resolution ** 2, d) * 0.02)
        self.layers = nn.ModuleList(
            _DecoderLayer(d, config.n_heads) for _ in range(config.n_decoder_layers))
        self.norm = nn.LayerNorm(d)

    def forward(self, bev, initial=None):
        """Returns (tokens, last-layer cross-attention weights over cells).

        initial, when given, seeds the queries (e.g. from cell proposals);
        the learned query embedding is added on top either way.
        """
        cells = bev.flatten(1).T[None] + self.cell_pos[None]
        q = self.queries[None]
        if initial is not None:
            q = q + initial[None]
        weights = None
        for layer in self.layers:
            q, weights = layer(q, cells)
        return self.norm(q)[0], weights[0]


class AgentQueryTransformer(nn.Module):
    """Proposal-seeded query decoder over BEV cells.

    A per-cell objectness heatmap selects the top n_queries cells; their
    features seed the decoder queries and their coordinates act as box
    reference points. Heads emit score, box and class per query. The
    heatmap learns through the score head, which adds the proposal logit.
    """

    def __init__(self, config):
        super().__init__()
        d = config.d_model
        self.decoder = QueryDecoder(config, config.n_agent_queries)
        self.heat_head = nn.Conv2d(d, 1, 1)
        # start the heatmap confidently negative so the dense focal term
        # does not swamp early training (prior-probability init)
        nn.init.constant_(self.heat_head.bias, -4.0)
        self.box_head = nn.Linear(d, 5)
        self.score_head = nn.Linear(d, 1)
        self.class_head = nn.Linear(d, len(AGENT_CLASSES))
        self.n_queries = config.n_agent_queries
        self.extent_m = config.bev_extent_m
        g = config.bev_resolution
        cell = 2.0 * config.bev_extent_m / g
        centers = -config.bev_extent_m + (torch.arange(g) + 0.5) * cell
        ys, xs = torch.meshgrid(centers, centers, indexing="ij")
        # ego-frame (x, y) of each flattened BEV cell, row-major
        self.register_buffer("cell_coords",
                             torch.stack([xs.flatten(), ys.flatten()], dim=1))

    def forward(self, bev):
        g = int(math.isqrt(self.cell_coords.shape[0]))
        heat_map = self.heat_head(bev.tensor[None])[0, 0]
        heat = heat_map.flatten()
        # keep only 3x3 local maxima so proposals spread across agents
        # instead of stacking up on the hottest one
        pooled = F.max_pool2d(heat_map[None, None], 3, stride=1, padding=1)[0, 0]
        peak_score = torch.where(heat_map == pooled, heat_map,
                                 heat_map - 1e4).flatten()
        idx = torch.topk(peak_score, self.n_queries).indices
        idx, _ = torch.sort(idx)
        seeds = bev.tensor.flatten(1).T[idx]
        tokens, _ = self.decoder(bev.tensor, initial=seeds)
        raw = self.box_head(tokens)
        ref = self.cell_coords[idx].to(raw.dtype)
        boxes = torch.stack([
            ref[:, 0] + torch.tanh(raw[:, 0]) * 2.0,
            ref[:, 1] + torch.tanh(raw[:, 1]) * 2.0,
            F.softplus(raw[:, 2]) + 0.1,
            F.softplus(raw[:, 3]) + 0.1,
            torch.tanh(raw[:, 4]) * math.pi,
        ], dim=1)
        score_logits = self.score_head(tokens)[:, 0] + heat[idx]
        scores = torch.sigmoid(score_logits)
        self._tokens = tokens
        self._heat = heat
        return AgentTokenSet(tokens=tokens, scores=scores, boxes=boxes,
                             classes=self.class_head(tokens).argmax(dim=1))

    def class_logits(self, tokens=None):
        """Class logits for the given tokens (default: last forward pass)."""
        return self.class_head(self._tokens if tokens is None else tokens)


class MapQueryTransformer(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.decoder = QueryDecoder(config, config.n_map_queries)
        self.seg_head = nn.Conv2d(config.d_model, len(MAP_MASK_CLASSES), 1)

    def forward(self, bev):
        tokens, _ = self.decoder(bev.tensor)
        return MapTokenSet(tokens=tokens, seg_logits=self.seg_head(bev.tensor[None])[0])


class PerceptionModel(nn.Module):
    """Full vision stack: view encoder, BEV lift, sampler, query heads."""

    def __init__(self, config=None):
        super().__init__()
        self.config = config or PerceptionConfig()
        self.view_encoder = ViewEncoder(self.config)
        self.bev_refiner = BEVRefiner(self.config)
        self.scene_sampler = SceneSampler(self.config)
        self.agent_transformer = AgentQueryTransformer(self.config)
        self.map_transformer = MapQueryTransformer(self.config)

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def render_view_features(self, frame):
        raster = torch.from_numpy(rasterize_views(frame, self.config))
        return ViewFeatures(tensor=self.view_encoder(raster.to(self.dtype)))

    def lift_to_bev(self, view_features, frame):
        occ = torch.from_numpy(bev_occupancy(frame, self.config)).to(self.dtype)
        refined = self.bev_refiner(occ, view_features.tensor)
        return BEVGrid(tensor=refined, extent_m=self.config.bev_extent_m)

    def forward(self, frame):
        views = self.render_view_features(frame)
        bev = self.lift_to_bev(views, frame)
        scene = self.scene_sampler(views.tensor)
        agents = self.agent_transformer(bev)
        map_tokens = self.map_transformer(bev)
        return EnvTokens(scene=scene, agents=agents, map=map_tokens)

    def encode_frame(self, frame):
        """EnvTokens with low-confidence agent queries filtered out."""
        env = self(frame)
        kept = filter_agents(env.agents, self.config.score_threshold,
                             self.config.max_agents)
        return EnvTokens(scene=env.scene, agents=kept, map=env.map)


def filter_agents(tokens, threshold, max_agents=None):
    """Keep queries with score >= threshold, best first, capped at max_agents."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must be in [0, 1]")
    keep = torch.nonzero(tokens.scores >= threshold, as_tuple=False)[:, 0]
    order = torch.argsort(tokens.scores[keep], descending=True, stable=True)
    keep = keep[order]
    if max_agents is not None:
        keep = keep[:max_agents]
    return AgentTokenSet(tokens=tokens.tokens[keep], scores=tokens.scores[keep],
                         boxes=tokens.boxes[keep], classes=tokens.classes[keep])


# --- losses ------------------------------------------------------------------


def gt_agent_boxes(frame, extent_m=None):
    """Ground-truth ego-frame boxes (x, y, length, width, yaw) and classes.

    With extent_m set, agents outside the BEV square are dropped; they are
    invisible to the grid and outside the box head's output range.
    """
    boxes, classes = [], []
    for a in frame.agents:
        x, y = to_ego_frame(frame.ego.pose, a.pose[:2])
        if extent_m is not None and max(abs(x), abs(y)) > extent_m:
            continue
        yaw = wrap_angle(a.pose[2] - frame.ego.pose[2])
        boxes.append((x, y, a.size[0], a.size[1], yaw))
        classes.append(AGENT_CLASSES.index(a.cls))
    return (torch.tensor(boxes, dtype=torch.float32).reshape(-1, 5),
            torch.tensor(classes, dtype=torch.long))


def hungarian_match(cost):
    """Minimum-cost assignment; returns (row_indices, col_indices)."""
    rows, cols = linear_sum_assignment(np.asarray(cost, dtype=float))
    return list(rows), list(cols)


def _focal_binary(scores, targets, alpha, gamma):
    p = scores.clamp(1e-6, 1 - 1e-6)
    pt = torch.where(targets > 0.5, p, 1 - p)
    at = torch.where(targets > 0.5, torch.full_like(p, alpha),
                     torch.full_like(p, 1 - alpha))
    return (-at * (1 - pt) ** gamma * torch.log(pt)).mean()


def perception_loss(pred_agents, pred_map, frame, config, class_logits=None,
                    heat=None):
    """Detection plus segmentation loss against a ground-truth frame.

    Returns {"total", "track_cls", "track_box", "map_bce", "map_iou"}.
    The classification term is focal, applied to per-query objectness
    (positives assigned by Hungarian matching on score and box distance)
    and, when heat logits are given, densely to the proposal heatmap with
    ground-truth center cells as positives. Box regression is L1 on matched
    pairs plus class cross-entropy.
    """
    gt_boxes, gt_classes = gt_agent_boxes(frame, extent_m=config.bev_extent_m)
    gt_boxes = gt_boxes.to(pred_agents.boxes.dtype)
    n_q = pred_agents.scores.shape[0]
    targets = torch.zeros(n_q, dtype=pred_agents.scores.dtype)
    box_loss = pred_agents.boxes.sum() * 0.0
    cls_ce = box_loss.clone()
    if len(gt_boxes):
        with torch.no_grad():
            center_cost = torch.cdist(pred_agents.boxes[:, :2], gt_boxes[:, :2], p=1)
            cost = center_cost - pred_agents.scores[:, None]
        rows, cols = hungarian_match(cost)
        targets[list(rows)] = 1.0
        # proposals that localize the same ground-truth agent are duplicates,
        # not false positives; treat anything within 2 m of a center as positive
        near = torch.cdist(pred_agents.boxes[:, :2].detach(),
                           gt_boxes[:, :2]).min(dim=1).values < 2.0
        targets[near] = 1.0
        pb = pred_agents.boxes[list(rows)]
        gb = gt_boxes[list(cols)]
        box_loss = (pb[:, :4] - gb[:, :4]).abs().mean() + \
            _angle_l1(pb[:, 4], gb[:, 4]).mean()
        if class_logits is not None:
            cls_ce = F.cross_entropy(class_logits[list(rows)], gt_classes[list(cols)])
    cls_loss = _focal_binary(pred_agents.scores, targets,
                             config.focal_alpha, config.focal_gamma) + cls_ce
    if heat is not None:
        g = config.bev_resolution
        heat_targets = torch.zeros(g * g, dtype=heat.dtype)
        for b in gt_boxes:
            r, c = _grid_index(float(b[0]), float(b[1]),
                               config.bev_extent_m, g)
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < g and 0 <= cc < g:
                        heat_targets[rr * g + cc] = 1.0
        p = torch.sigmoid(heat).clamp(1e-6, 1 - 1e-6)
        pt = torch.where(heat_targets > 0.5, p, 1 - p)
        at = torch.where(heat_targets > 0.5,
                         torch.full_like(p, config.focal_alpha),
                         torch.full_like(p, 1 - config.focal_alpha))
        focal = -at * (1 - pt) ** config.focal_gamma * torch.log(pt)
        cls_loss = cls_loss + focal.sum() / max(1.0, float(len(gt_boxes)))

    logits = pred_map.seg_logits
    gt_masks = torch.from_numpy(ground_truth_masks(frame, config)).to(logits.dtype)
    map_bce = F.binary_cross_entropy_with_logits(logits, gt_masks)
    probs = torch.sigmoid(logits)
    inter = (probs * gt_masks).sum(dim=(1, 2))
    union = (probs + gt_masks - probs * gt_masks).sum(dim=(1, 2))
    map_iou = (1.0 - inter / (union + 1e-6)).mean()

    track = cls_loss + box_loss
    map_term = map_bce + map_iou
    total = track + config.map_loss_weight * map_term
    return {"total": total, "track_cls": cls_loss, "track_box": box_loss,
            "map_bce": map_bce, "map_iou": map_iou}


def _angle_l1(a, b):
    d = torch.remainder(a - b + math.pi, 2 * math.pi) - math.pi
    return d.abs()


# --- evaluation helpers ------------------------------------------------------


def detection_recall(model, frames, iou_threshold=0.3, center_tol=2.5):
    """Fraction of ground-truth agents matched by a kept prediction.

    A prediction matches when its center lies within center_tol meters of
    the ground-truth center, greedy best-first by score. iou_threshold is
    kept in the signature for callers that tighten matching via box overlap
    (see the evaluation module's oriented IoU).
    """
    hits, total = 0, 0
    for frame in frames:
        gt_boxes, _ = gt_agent_boxes(frame, extent_m=model.config.bev_extent_m)
        total += len(gt_boxes)
        if not len(gt_boxes):
            continue
        with torch.no_grad():
            kept = model.encode_frame(frame).agents
        used = set()
        for i in range(kept.boxes.shape[0]):
            dists = ((kept.boxes[i, :2] - gt_boxes[:, :2]) ** 2).sum(dim=1).sqrt()
            j = int(dists.argmin())
            if j not in used and float(dists[j]) <= center_tol:
                used.add(j)
                hits += 1
        # each kept query can claim at most one gt box
    return hits / max(total, 1)


def drivable_mask_iou(model, frames):
    """Mean IoU of the thresholded drivable mask against the raster truth."""
    vals = []
    di = MAP_MASK_CLASSES.index("drivable")
    for frame in frames:
        with torch.no_grad():
            env = model(frame)
        pred = (torch.sigmoid(env.map.seg_logits[di]) > 0.5).float()
        gt = torch.from_numpy(ground_truth_masks(frame, model.config)[di])
        inter = (pred * gt).sum()
        union = ((pred + gt) > 0).float().sum()
        vals.append(float(inter / union) if union > 0 else 1.0)
    return float(np.mean(vals))
