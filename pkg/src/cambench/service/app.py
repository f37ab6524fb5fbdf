"""FastAPI service wrapping the benchmarking core.

Models are loaded once into an in-process registry and shared read-only
across requests, so many clients can probe the same network cheaply.
"""

from __future__ import annotations

import base64
import io
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException

from .. import __version__
from ..bench import (BenchmarkError, RunConfig, best_footer, make_overlay,
                     run_benchmark, write_per_slice_csv, write_summary_csv)
from ..cams import CAM_METHODS, CamError, compute_cam, postprocess
from ..classify import ScoredSlice, ScoreFileError, confusion_at, prf, read_scores
from ..dataset import DatasetError, read_image, window_hu
from ..engine import EngineError, forward, gradients_at, make_rescorer
from ..locmetrics import MetricError, binarize
from ..modelio import ModelFormatError, Network, load_network
from . import schemas as s


class _LoadedModel:
    def __init__(self, net: Network, spec_path: str, weights_path: str):
        self.net = net
        self.spec_path = spec_path
        self.weights_path = weights_path


def _model_info(model_id: str, net: Network) -> s.ModelInfo:
    shapes = net.spec.output_shapes()
    return s.ModelInfo(
        model_id=model_id,
        input_shape=net.spec.input_shape,
        class_count=net.spec.class_count,
        layers=[s.LayerInfo(name=l.name, kind=l.kind, output_shape=shapes[l.name])
                for l in net.spec.layers],
        conv_layers=net.spec.conv_layer_names(),
    )


def _resolve_input(net: Network, req: s.ForwardRequest) -> np.ndarray:
    if (req.tensor is None) == (req.image_path is None):
        raise HTTPException(400, "provide exactly one of tensor or image_path")
    if req.tensor is not None:
        x = np.asarray(req.tensor, dtype=np.float64)
    else:
        path = Path(req.image_path)
        if not path.exists():
            raise HTTPException(404, f"image not found: {path}")
        try:
            x = window_hu(read_image(path))[None, :, :]
        except DatasetError as e:
            raise HTTPException(400, str(e))
    if x.ndim != 3 or x.shape != net.spec.input_shape:
        raise HTTPException(400, f"input shape {x.shape} != model input {net.spec.input_shape}")
    return x[None, :, :, :]


def create_app() -> FastAPI:
    app = FastAPI(title="cambench", version=__version__)
    registry: dict[str, _LoadedModel] = {}

    def get_model(model_id: str) -> _LoadedModel:
        if model_id not in registry:
            raise HTTPException(404, f"model {model_id!r} not loaded")
        return registry[model_id]

    @app.get("/health", response_model=s.HealthResponse)
    def health():
        return s.HealthResponse(status="ok", version=__version__)

    @app.get("/methods", response_model=s.MethodsResponse)
    def methods():
        return s.MethodsResponse(methods=list(CAM_METHODS))

    @app.post("/models", response_model=s.ModelInfo)
    def load_model(req: s.LoadModelRequest):
        for p in (req.spec_path, req.weights_path):
            if not Path(p).exists():
                raise HTTPException(404, f"file not found: {p}")
        try:
            net = load_network(req.spec_path, req.weights_path)
        except ModelFormatError as e:
            raise HTTPException(400, str(e))
        registry[req.model_id] = _LoadedModel(net, req.spec_path, req.weights_path)
        return _model_info(req.model_id, net)

    @app.get("/models", response_model=s.ModelListResponse)
    def list_models():
        return s.ModelListResponse(
            models=[_model_info(k, v.net) for k, v in registry.items()])

    @app.post("/models/{model_id}/forward", response_model=s.ForwardResponse)
    def model_forward(model_id: str, req: s.ForwardRequest):
        net = get_model(model_id).net
        x = _resolve_input(net, req)
        try:
            trace = forward(net, x)
        except EngineError as e:
            raise HTTPException(400, str(e))
        return s.ForwardResponse(logits=[float(v) for v in trace.logits[0]])

    @app.post("/models/{model_id}/explain", response_model=s.ExplainResponse)
    def model_explain(model_id: str, req: s.ExplainRequest):
        net = get_model(model_id).net
        if req.method not in CAM_METHODS:
            raise HTTPException(400, f"unknown CAM method {req.method!r}")
        x = _resolve_input(net, req)
        try:
            layer = net.spec.resolve_layer(req.layer)
        except KeyError as e:
            raise HTTPException(400, str(e.args[0]))
        if not 0 <= req.class_index < net.spec.class_count:
            raise HTTPException(400, f"class index {req.class_index} out of range")
        try:
            trace = forward(net, x, record={layer})
            acts = trace.activations[layer][0]
            if req.method == "ablation_cam":
                raw = compute_cam(
                    req.method, acts,
                    rescore=make_rescorer(net, trace, layer, 0, req.class_index),
                    y_c=float(trace.logits[0, req.class_index]),
                )
            elif req.method == "eigen_cam":
                raw = compute_cam(req.method, acts)
            else:
                grads = gradients_at(trace, net, layer, req.class_index)[0]
                raw = compute_cam(req.method, acts, grads)
            heatmap = postprocess(raw, net.spec.input_shape[1:])
        except (EngineError, CamError) as e:
            raise HTTPException(400, str(e))
        mask = None
        if req.tau is not None:
            try:
                mask = binarize(heatmap, req.tau).tolist()
            except MetricError as e:
                raise HTTPException(400, str(e))
        return s.ExplainResponse(
            method=req.method, layer=req.layer, class_index=req.class_index,
            logits=[float(v) for v in trace.logits[0]],
            heatmap=heatmap.tolist(), mask=mask,
        )

    @app.post("/models/{model_id}/benchmark", response_model=s.BenchmarkResponse)
    def model_benchmark(model_id: str, req: s.BenchmarkRequest):
        loaded = get_model(model_id)
        cfg = RunConfig(
            spec_path=loaded.spec_path,
            weights_path=loaded.weights_path,
            manifest_path=req.manifest_path,
            class_index=req.class_index,
            tau=req.tau,
            calibration_split=req.calibration_split,
            jobs=req.jobs,
        )
        if req.methods:
            cfg.methods = req.methods
        if req.layers:
            cfg.layers = req.layers
        if req.modes:
            cfg.modes = req.modes
        try:
            cfg.validate()
            result = run_benchmark(cfg)
        except (BenchmarkError, ModelFormatError, DatasetError, MetricError, OSError) as e:
            raise HTTPException(400, str(e))
        rows = [s.SummaryRowModel(**vars(r)) for r in result.rows]
        if req.out_dir:
            out = Path(req.out_dir)
            out.mkdir(parents=True, exist_ok=True)
            write_summary_csv(out / "summary.csv", result.rows)
            write_per_slice_csv(out / "per_slice.csv", result.per_slice)
        best = max(rows, key=lambda r: r.pixel_dice) if rows else None
        return s.BenchmarkResponse(rows=rows, best_pixel_dice=best,
                                   n_eval_slices=result.n_eval_slices,
                                   footer=best_footer(result))

    @app.post("/classify/eval", response_model=s.ClassifyEvalResponse)
    def classify_eval(req: s.ClassifyEvalRequest):
        if (req.scores is None) == (req.scores_path is None):
            raise HTTPException(400, "provide exactly one of scores or scores_path")
        if not req.thresholds:
            raise HTTPException(400, "empty threshold list")
        try:
            if req.scores_path is not None:
                slices = read_scores(req.scores_path)
            else:
                slices = [ScoredSlice(m.slice_id, m.score, m.label) for m in req.scores]
        except (ScoreFileError, OSError) as e:
            raise HTTPException(400, str(e))
        points = []
        for t in sorted(req.thresholds, reverse=True):
            p, r, f1 = prf(confusion_at(slices, t))
            points.append(s.PrPoint(threshold=t, precision=p, recall=r, f1=f1))
        return s.ClassifyEvalResponse(points=points)

    @app.post("/models/{model_id}/overlay", response_model=s.OverlayResponse)
    def model_overlay(model_id: str, req: s.OverlayRequest):
        loaded = get_model(model_id)
        cfg = RunConfig(
            spec_path=loaded.spec_path,
            weights_path=loaded.weights_path,
            manifest_path=req.manifest_path,
            methods=[req.method],
            layers=[req.layer],
            class_index=req.class_index,
            tau=req.tau,
        )
        try:
            cfg.validate()
            rgb, record, tau = make_overlay(cfg, req.slice_id)
        except (BenchmarkError, ModelFormatError, DatasetError, MetricError, OSError) as e:
            raise HTTPException(400, str(e))
        h, w, _ = rgb.shape
        buf = io.BytesIO()
        buf.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        buf.write(rgb.tobytes())
        if req.out_path:
            Path(req.out_path).write_bytes(buf.getvalue())
        return s.OverlayResponse(
            ppm_base64=base64.b64encode(buf.getvalue()).decode("ascii"),
            tau=tau, pixel_dice=record.pixel_dice, pixel_iou=record.pixel_iou,
            loose_hit=record.loose_hit, out_path=req.out_path,
        )

    return app
