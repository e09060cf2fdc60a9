"""Synthetic driving-sign corpus: images, QA pairs, and frame labels.

Each frame is a smooth road scene (gradient sky, road plane, lane dashes)
with at most one high-contrast traffic sign. Eleven classes cover ten sign
types plus a clear road. Ten QA templates per frame span the four question
categories, and every answer is derivable from the rendered scene, so the
corpus is self-consistent by construction. All randomness flows from one
seeded generator; a given (seed, frames, views, size) is byte-identical
across runs.

Outputs under the target directory:
    images/<frame>_v<view>.png   rendered views
    qa.jsonl                     VQA records (id/image_paths/question/answer/category)
    frames.jsonl                 per-frame label + sign bounding box sidecar
"""

import json
import os

import numpy as np
from PIL import Image, ImageDraw

SIGN_CLASSES = (
    "stop", "yield", "speed_limit_30", "speed_limit_60", "no_entry",
    "turn_left", "turn_right", "crosswalk", "signal_red", "signal_green",
    "clear_road",
)

# Per-class answer facts. Every string is a full answer so the corpus reads
# naturally and the decoder has multi-token targets.
CLASS_FACTS = {
    "stop": {
        "phrase": "a stop sign",
        "color": "the sign is red",
        "shape": "the sign is an octagon",
        "presence": "yes there is a sign ahead",
        "prediction": "the vehicle will brake to a complete stop",
        "prediction2": "traffic will halt at the marked line",
        "planning": "plan to stop fully before the line",
        "planning2": "a full stop followed by a careful restart",
        "behavior": "stop completely and yield to crossing traffic",
        "behavior2": "hold at the line until the way is clear",
    },
    "yield": {
        "phrase": "a yield sign",
        "color": "the sign is red and white",
        "shape": "the sign is a downward triangle",
        "presence": "yes there is a sign ahead",
        "prediction": "the vehicle will slow and merge when safe",
        "prediction2": "traffic will give way to the crossing road",
        "planning": "plan to slow down and give right of way",
        "planning2": "a gentle deceleration while checking cross traffic",
        "behavior": "yield to any vehicle on the priority road",
        "behavior2": "proceed only after the crossing road is clear",
    },
    "speed_limit_30": {
        "phrase": "a 30 speed limit sign",
        "color": "the sign is white with a red ring",
        "shape": "the sign is a circle",
        "presence": "yes there is a sign ahead",
        "prediction": "the vehicle will slow to 30",
        "prediction2": "traffic will settle at 30 through this zone",
        "planning": "plan to keep the speed at 30",
        "planning2": "an early lift off the throttle down to 30",
        "behavior": "drive no faster than 30 here",
        "behavior2": "hold a steady 30 until the limit changes",
    },
    "speed_limit_60": {
        "phrase": "a 60 speed limit sign",
        "color": "the sign is white with a red ring",
        "shape": "the sign is a circle",
        "presence": "yes there is a sign ahead",
        "prediction": "the vehicle will cruise near 60",
        "prediction2": "traffic will flow at about 60 through this stretch",
        "planning": "plan to keep the speed at 60",
        "planning2": "a steady cruise at 60 with normal spacing",
        "behavior": "drive no faster than 60 here",
        "behavior2": "hold a steady 60 until the limit changes",
    },
    "no_entry": {
        "phrase": "a no entry sign",
        "color": "the sign is red with a white bar",
        "shape": "the sign is a circle",
        "presence": "yes there is a sign ahead",
        "prediction": "the vehicle will turn away from the closed road",
        "prediction2": "traffic will reroute around the restriction",
        "planning": "plan an alternative route around the closed road",
        "planning2": "a detour that avoids the restricted street",
        "behavior": "do not drive past this sign",
        "behavior2": "keep out of the restricted roadway",
    },
    "turn_left": {
        "phrase": "a turn left sign",
        "color": "the sign is blue with a white arrow",
        "shape": "the sign is a circle",
        "presence": "yes there is a sign ahead",
        "prediction": "the vehicle will steer into the left turn",
        "prediction2": "traffic will bear left at the junction",
        "planning": "plan a left turn at the junction",
        "planning2": "an early move to the left lane before turning",
        "behavior": "follow the arrow and turn left",
        "behavior2": "commit to the left turn indicated",
    },
    "turn_right": {
        "phrase": "a turn right sign",
        "color": "the sign is blue with a white arrow",
        "shape": "the sign is a circle",
        "presence": "yes there is a sign ahead",
        "prediction": "the vehicle will steer into the right turn",
        "prediction2": "traffic will bear right at the junction",
        "planning": "plan a right turn at the junction",
        "planning2": "an early move to the right lane before turning",
        "behavior": "follow the arrow and turn right",
        "behavior2": "commit to the right turn indicated",
    },
    "crosswalk": {
        "phrase": "a crosswalk sign",
        "color": "the sign is yellow and black",
        "shape": "the sign is a diamond",
        "presence": "yes there is a sign ahead",
        "prediction": "the vehicle will slow for possible pedestrians",
        "prediction2": "foot traffic may step onto the crossing ahead",
        "planning": "plan to cover the brake near the crossing",
        "planning2": "a slow approach with attention on the curbs",
        "behavior": "give way to pedestrians on the crossing",
        "behavior2": "approach gently and be ready to stop for walkers",
    },
    "signal_red": {
        "phrase": "a traffic light showing red",
        "color": "the light is red",
        "shape": "the signal is a rectangle housing round lights",
        "presence": "yes there is a sign ahead",
        "prediction": "the vehicle will wait at the light",
        "prediction2": "queued traffic will stay stopped until green",
        "planning": "plan to hold position until the light turns green",
        "planning2": "a smooth stop behind the waiting queue",
        "behavior": "remain stopped while the light is red",
        "behavior2": "wait for green before entering the junction",
    },
    "signal_green": {
        "phrase": "a traffic light showing green",
        "color": "the light is green",
        "shape": "the signal is a rectangle housing round lights",
        "presence": "yes there is a sign ahead",
        "prediction": "the vehicle will continue through the junction",
        "prediction2": "traffic will keep moving while the light is green",
        "planning": "plan to proceed through while the light holds",
        "planning2": "a steady pass through the junction without stopping",
        "behavior": "proceed with normal care through the junction",
        "behavior2": "carry on through while watching cross traffic",
    },
    "clear_road": {
        "phrase": "no sign at all",
        "color": "there is no sign to describe",
        "shape": "there is no sign to describe",
        "presence": "no the road ahead is clear",
        "prediction": "the vehicle will continue at its current speed",
        "prediction2": "traffic will flow normally along the road",
        "planning": "plan to keep lane and speed unchanged",
        "planning2": "an uneventful cruise along the open road",
        "behavior": "drive normally and monitor the road",
        "behavior2": "keep a steady pace on the open road",
    },
}

# (category, question, fact key)
QA_TEMPLATES = (
    ("perception", "what sign is visible in this frame ?", "phrase"),
    ("perception", "what color is the sign ?", "color"),
    ("perception", "what shape is the sign ?", "shape"),
    ("perception", "is there a sign in this frame ?", "presence"),
    ("prediction", "what will the ego vehicle most likely do next ?", "prediction"),
    ("prediction", "how will the surrounding traffic respond ?", "prediction2"),
    ("planning", "what should the driver plan to do here ?", "planning"),
    ("planning", "which maneuver should be planned in response ?", "planning2"),
    ("behavior", "what behavior does this scene require ?", "behavior"),
    ("behavior", "how should the vehicle behave at this location ?", "behavior2"),
)


# -- rendering ---------------------------------------------------------------

def _background(size, rng):
    """Smooth sky-over-road scene with faint lane dashes."""
    horizon = int(size * (0.52 + 0.08 * rng.random()))
    sky_top = np.array([150, 190, 230], dtype=np.float64) + rng.integers(-12, 13, 3)
    sky_bot = np.array([210, 225, 240], dtype=np.float64) + rng.integers(-8, 9, 3)
    road_top = np.array([120, 120, 124], dtype=np.float64) + rng.integers(-6, 7, 3)
    road_bot = np.array([70, 70, 74], dtype=np.float64) + rng.integers(-6, 7, 3)
    img = np.empty((size, size, 3), dtype=np.float64)
    t_sky = np.linspace(0.0, 1.0, horizon)[:, None]
    img[:horizon] = (sky_top + t_sky * (sky_bot - sky_top))[:, None, :]
    t_road = np.linspace(0.0, 1.0, size - horizon)[:, None]
    img[horizon:] = (road_top + t_road * (road_bot - road_top))[:, None, :]
    pil = Image.fromarray(np.clip(img, 0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(pil)
    # centre lane dashes, perspective-narrowed toward the horizon
    cx = size // 2 + int(rng.integers(-10, 11))
    y = horizon + 8
    while y < size - 6:
        w = max(2, (y - horizon) // 18)
        draw.rectangle([cx - w, y, cx + w, y + 8], fill=(140, 140, 132))
        y += 26
    return pil, draw, horizon


def _octagon(cx, cy, r):
    k = 0.4142 * r  # tan(22.5deg) * r
    return [(cx - k, cy - r), (cx + k, cy - r), (cx + r, cy - k), (cx + r, cy + k),
            (cx + k, cy + r), (cx - k, cy + r), (cx - r, cy + k), (cx - r, cy - k)]


def _draw_sign(draw, class_name, cx, cy, r):
    red = (205, 20, 25)
    white = (245, 245, 245)
    blue = (20, 70, 200)
    black = (15, 15, 15)
    yellow = (240, 200, 20)
    if class_name == "stop":
        draw.polygon(_octagon(cx, cy, r), fill=red, outline=white, width=max(3, r // 6))
    elif class_name == "yield":
        pts = [(cx - r, cy - int(0.7 * r)), (cx + r, cy - int(0.7 * r)), (cx, cy + r)]
        draw.polygon(pts, fill=white, outline=red, width=max(4, r // 4))
    elif class_name in ("speed_limit_30", "speed_limit_60"):
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=white,
                     outline=red, width=max(4, r // 4))
        bar_h = max(3, r // 5)
        if class_name == "speed_limit_30":
            draw.rectangle([cx - r // 2, cy - bar_h, cx + r // 2, cy + bar_h], fill=black)
        else:
            gap = max(3, r // 4)
            draw.rectangle([cx - r // 2, cy - gap - bar_h, cx + r // 2, cy - gap + bar_h],
                           fill=black)
            draw.rectangle([cx - r // 2, cy + gap - bar_h, cx + r // 2, cy + gap + bar_h],
                           fill=black)
    elif class_name == "no_entry":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=red)
        bar_h = max(4, r // 4)
        draw.rectangle([cx - int(0.7 * r), cy - bar_h, cx + int(0.7 * r), cy + bar_h],
                       fill=white)
    elif class_name in ("turn_left", "turn_right"):
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=blue)
        h = r // 3
        sgn = -1 if class_name == "turn_left" else 1
        tip = cx + sgn * int(0.65 * r)
        base = cx - sgn * int(0.1 * r)
        draw.polygon([(tip, cy), (base, cy - int(0.55 * r)), (base, cy + int(0.55 * r))],
                     fill=white)
        draw.rectangle([min(cx - sgn * int(0.6 * r), base), cy - h // 2,
                        max(cx - sgn * int(0.6 * r), base), cy + h // 2], fill=white)
    elif class_name == "crosswalk":
        draw.polygon([(cx, cy - r), (cx + r, cy), (cx, cy + r), (cx - r, cy)],
                     fill=yellow, outline=black, width=max(3, r // 7))
        w = max(3, r // 6)
        for dx in (-r // 3, 0, r // 3):
            draw.rectangle([cx + dx - w // 2, cy - r // 3, cx + dx + w // 2, cy + r // 3],
                           fill=black)
    elif class_name in ("signal_red", "signal_green"):
        hw, hh = int(0.55 * r), r
        draw.rectangle([cx - hw, cy - hh, cx + hw, cy + hh], fill=(35, 35, 35),
                       outline=black, width=2)
        dr = int(0.38 * r)
        dim = (90, 90, 90)
        lamps = [dim, dim, dim]
        if class_name == "signal_red":
            lamps[0] = (235, 30, 30)
        else:
            lamps[2] = (40, 230, 70)
        for slot, colour in enumerate(lamps):
            ly = cy - hh + (2 * slot + 1) * hh // 3
            draw.ellipse([cx - dr, ly - dr, cx + dr, ly + dr], fill=colour)
    else:
        raise ValueError(f"no renderer for class {class_name!r}")


def render_frame(class_name, rng, size=224):
    """Returns (PIL image, bbox) where bbox is [x0, y0, x1, y1] or None."""
    pil, draw, horizon = _background(size, rng)
    if class_name == "clear_road":
        # burn the placement draws so frame layout stays aligned across classes
        rng.integers(0, 2)
        rng.random()
        rng.random()
        return pil, None
    side = int(rng.integers(0, 2))  # 0 = left, 1 = right
    r = int(size * (0.17 + 0.10 * rng.random()))
    margin = r + 8
    if side == 0:
        cx = int(margin + rng.random() * (size * 0.35 - margin))
    else:
        cx = int(size - margin - rng.random() * (size * 0.35 - margin))
    cy = int(np.clip(horizon - int(0.55 * r), margin, size - margin - r))
    pole_w = max(2, r // 10)
    draw.rectangle([cx - pole_w, cy + r - 2, cx + pole_w, min(size - 4, cy + 3 * r)],
                   fill=(85, 85, 85))
    _draw_sign(draw, class_name, cx, cy, r)
    pad = 4
    bbox = [max(0, cx - r - pad), max(0, cy - r - pad),
            min(size - 1, cx + r + pad), min(size - 1, cy + r + pad)]
    return pil, bbox


def _frame_records(frame_id, class_name, image_paths):
    facts = CLASS_FACTS[class_name]
    records = []
    for k, (category, question, key) in enumerate(QA_TEMPLATES):
        answer = facts[key]
        records.append({
            "id": f"{frame_id}_q{k:02d}",
            "image_paths": image_paths,
            "question": question,
            "answer": answer,
            "category": category,
        })
    return records


def generate_corpus(out_dir, seed=0, frames=500, views=1, size=224):
    """Write the corpus; returns a small summary dict."""
    if frames < 1 or views < 1:
        raise ValueError("frames and views must be positive")
    rng = np.random.default_rng(seed)
    image_dir = os.path.join(out_dir, "images")
    os.makedirs(image_dir, exist_ok=True)
    qa_rows, frame_rows = [], []
    class_cycle = [SIGN_CLASSES[i % len(SIGN_CLASSES)] for i in range(frames)]
    rng.shuffle(class_cycle)
    for f in range(frames):
        frame_id = f"frame{f:05d}"
        class_name = class_cycle[f]
        paths, bbox0 = [], None
        for v in range(views):
            img, bbox = render_frame(class_name, rng, size=size)
            if v == 0:
                bbox0 = bbox
            rel = os.path.join("images", f"{frame_id}_v{v}.png")
            img.save(os.path.join(out_dir, rel))
            paths.append(rel)
        qa_rows.extend(_frame_records(frame_id, class_name, paths))
        frame_rows.append({
            "frame_id": frame_id,
            "label": SIGN_CLASSES.index(class_name),
            "class_name": class_name,
            "image_paths": paths,
            "bbox": bbox0,
        })
    with open(os.path.join(out_dir, "qa.jsonl"), "w", encoding="utf-8") as fh:
        for row in qa_rows:
            fh.write(json.dumps(row) + "\n")
    with open(os.path.join(out_dir, "frames.jsonl"), "w", encoding="utf-8") as fh:
        for row in frame_rows:
            fh.write(json.dumps(row) + "\n")
    return {
        "frames": frames,
        "views": views,
        "qa_records": len(qa_rows),
        "classes": len(SIGN_CLASSES),
        "out_dir": out_dir,
    }


def load_frames(path):
    """Read the frames.jsonl sidecar."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    return rows
