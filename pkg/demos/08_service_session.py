#!/usr/bin/env python3
"""The interactive retrieval session, offline and over HTTP.

Builds a tiny gallery, starts the service in-process, replays a recorded
stroke sequence both through the offline engine and the HTTP endpoints, and
prints the per-stroke rank trace (they match exactly).
"""

import json
import threading
import urllib.request

import numpy as np

from sketchlab.models import RasterEncoder
from sketchlab.ranking import train_triplet
from sketchlab.runner import save_model
from sketchlab.service import build_service, replay_strokes
from sketchlab.synthetic import gen_synthetic_dataset, save_dataset
import tempfile
from pathlib import Path

ds = gen_synthetic_dataset(seed=5, n_classes=4, n_instances_per_class=4,
                           noise_strokes_per_sketch=0)
enc = RasterEncoder(seed=0)
train_triplet(enc, ds, epochs=20, seed=0)

with tempfile.TemporaryDirectory() as tmp:
    model_dir = Path(tmp) / "model"
    model_dir.mkdir()
    save_model(enc, model_dir / "encoder.ckpt")
    save_dataset(ds, model_dir / "dataset")
    server, state = build_service(model_dir, port=0)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    base = f"http://127.0.0.1:{server.server_address[1]}"
    print(f"service listening on {base}")

    # the recorded drawing: the true sketch of one instance, stroke by stroke
    target = ds[9]
    strokes = [c.tolist() for c in target.sketch.stroke_arrays()]
    offline = replay_strokes(state.engine_factory, strokes,
                             target_id=target.instance_id)

    def post(url, body):
        req = urllib.request.Request(url, data=json.dumps(body).encode(),
                                     method="POST",
                                     headers={"Content-Type": "application/json"})
        with urllib.request.urlopen(req) as resp:
            return json.loads(resp.read())

    sid = post(base + "/session", {"target_id": target.instance_id})["session_id"]
    print(f"session {sid}, drawing toward instance {target.instance_id}:")
    for k, (points, expect) in enumerate(zip(strokes, offline), start=1):
        got = post(f"{base}/session/{sid}/stroke", {"points": points})
        match = got["rank"] == expect["rank"] and got["topk"] == expect["topk"]
        print(f"  stroke {k}: rank {got['rank']:2d}, percentile "
          f"{got['rank_percentile']:6.2f}, top-5 {got['topk']}  "
          f"(offline match: {match})")

    # undo the last stroke and redraw it: identical response
    urllib.request.urlopen(urllib.request.Request(
        f"{base}/session/{sid}/stroke", method="DELETE")).read()
    redo = post(f"{base}/session/{sid}/stroke", {"points": strokes[-1]})
    print("undo+redraw reproduces the response:",
          redo["rank"] == offline[-1]["rank"])
    server.shutdown()
