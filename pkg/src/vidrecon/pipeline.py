"""Staged experiment runner.

Every stage writes its outputs to a content-addressed directory
``<cache>/<stage>-<key>`` where the key hashes the config fields the stage
depends on plus the keys of its inputs. A stage whose directory holds a
``done.json`` is skipped, so reruns, resumed runs and ablation arms that
share upstream stages reuse the same files.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import shutil
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import blobs
from . import decoder as dec
from . import encoder as enc
from . import evaluation as ev
from . import features as fe
from . import preprocess as pp
from . import simulator as sim
from . import ssl_data as sd
from .config import ARM_SYMBOLS, ExperimentConfig, Switches, stable_hash
from .data import load_paired

log = logging.getLogger(__name__)

STAGES = ("simulate", "align", "select-voxels", "train-encoder", "significance",
          "train-decoder", "reconstruct", "evaluate", "report")

# in-process memo of loaded objects, keyed by (kind, stage key)
_MEMO: dict[tuple[str, str], object] = {}


class StageFailure(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


class RunLocked(RuntimeError):
    pass


def fingerprint() -> dict:
    """Package version plus a hash of the package sources."""
    from . import __version__

    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return {"version": __version__, "source_sha256": h.hexdigest()[:16]}


@dataclass
class RunRecord:
    """Append-only log of one run: config, stage events, metric summary."""
    config: dict
    fingerprint: dict
    events: list[dict] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)

    def append(self, **event):
        self.events.append(event)

    def checkpoint_paths(self) -> dict[str, str]:
        out = {}
        for e in self.events:
            if e.get("status") in ("ran", "cached"):
                out.update(e.get("outputs", {}))
        return out

    def stage_dir(self, stage: str) -> Path | None:
        for e in reversed(self.events):
            if e["stage"] == stage and e.get("status") in ("ran", "cached"):
                return Path(e["dir"])
        return None

    def save(self, path):
        tmp = Path(path).with_suffix(".tmp")
        tmp.write_text(json.dumps(asdict(self), indent=1, sort_keys=True, default=ev._json_default))
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls(**json.loads(Path(path).read_text()))


class _Lock:
    def __init__(self, path: Path):
        self.path = path

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            if _pid_alive(self.path):
                raise RunLocked(f"{self.path.parent} is in use by another run ({self.path} exists)") from None
            log.warning("removing stale lock %s", self.path)
            self.path.unlink(missing_ok=True)
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def _pid_alive(lock: Path) -> bool:
    """True unless the lock names a process that no longer exists."""
    try:
        pid = int(lock.read_text().strip())
    except (OSError, ValueError):
        return True  # unreadable or foreign lock: respect it
    if pid == os.getpid():
        return True
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        pass
    return True


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=ev._json_default))


def _read_json(path: Path):
    return json.loads(Path(path).read_text())


class Pipeline:
    """Runs the stages of one experiment; ``resume=False`` recomputes every
    stage even when a cached result exists."""

    def __init__(self, config: ExperimentConfig, resume: bool = True):
        self.cfg = config.validate()
        self.resume = resume
        self.out = Path(config.output_dir)
        self.cache = config.cache_root
        self.arm = config.switches.arm()
        self.record = RunRecord(config.to_dict(), fingerprint())
        self.keys: dict[str, str] = {}

    # ------------------------------------------------------------------
    # plumbing

    def _stage(self, name: str, key_parts: dict, body, outputs=()):
        key = stable_hash(key_parts)
        self.keys[name] = key
        d = self.cache / f"{name}-{key}"
        done = d / "done.json"
        started = time.strftime("%Y-%m-%dT%H:%M:%S")
        if self.resume and done.exists():
            self.record.append(stage=name, key=key, status="cached", dir=str(d), started=started,
                               finished=started, outputs={o: str(d / o) for o in outputs})
            return d
        if d.exists():
            shutil.rmtree(d)
        d.mkdir(parents=True)
        t0 = time.time()
        try:
            body(d)
        except Exception as e:  # noqa: BLE001 - recorded, then re-raised as a stage failure
            self.record.append(stage=name, key=key, status="failed", dir=str(d), started=started,
                               error=f"{type(e).__name__}: {e}")
            self._save_record()
            raise StageFailure(name, e) from e
        _write_json(done, {"stage": name, "key": key, "seconds": round(time.time() - t0, 3)})
        self.record.append(stage=name, key=key, status="ran", dir=str(d), started=started,
                           finished=time.strftime("%Y-%m-%dT%H:%M:%S"),
                           seconds=round(time.time() - t0, 3),
                           outputs={o: str(d / o) for o in outputs})
        self._save_record()
        return d

    def _save_record(self):
        self.out.mkdir(parents=True, exist_ok=True)
        self.record.save(self.out / "run_record.json")

    def _memo(self, kind: str, key: str, load):
        k = (kind, key)
        if k not in _MEMO:
            _MEMO[k] = load()
        return _MEMO[k]

    # ------------------------------------------------------------------
    # stages

    def simulate(self):
        b = self.cfg.benchmark
        self.d_sim = self._stage("simulate", {"benchmark": b},
                                 lambda d: sim.make_benchmark(b, d), ("manifest.json",))
        self.manifest = sim.BenchmarkManifest.load(self.d_sim / "manifest.json")

    def _train_series(self):
        """(repeat lists, videos) of the training segments."""
        reps, vids = [], []
        for seg in self.manifest.train_segments:
            v, series = self.manifest.load_segment(seg)
            reps.append(series)
            vids.append(v)
        return reps, vids

    def align(self):
        s = self.cfg.selection

        def body(d):
            reps, vids = self._train_series()
            means = [sim.FmriSeries(np.mean([r.samples for r in rs], axis=0), rs[0].tr_seconds) for rs in reps]
            stack = fe.make_extractor(fe.spatial_spec(input_shape=vids[0].frame_shape))
            res = pp.find_temporal_alignment(
                means, vids, s.shifts, fe.grid_pooled_fn(stack, s.align_stage, s.align_grid),
                hrf=sim.canonical_hrf(self.manifest.tr_seconds))
            _write_json(d / "alignment.json", res.to_json())

        self.d_align = self._stage("align", {"sim": self.keys["simulate"], "shifts": s.shifts,
                                             "stage": s.align_stage, "grid": s.align_grid},
                                   body, ("alignment.json",))
        self.alignment = pp.AlignmentResult.from_json(_read_json(self.d_align / "alignment.json"))

    def select_voxels(self):
        s = self.cfg.selection

        def body(d):
            reps, _ = self._train_series()
            pp.select_voxels(reps, s.reproducibility_top_k, s.snr_fraction).save(d / "selection.json")

        self.d_sel = self._stage("select-voxels", {"sim": self.keys["simulate"],
                                                   "k": s.reproducibility_top_k, "f": s.snr_fraction},
                                 body, ("selection.json",))
        self.selection = pp.VoxelSelection.load(self.d_sel / "selection.json")
        self.train = load_paired(self.manifest, self.selection, self.alignment, "train")
        self.test = load_paired(self.manifest, self.selection, self.alignment, "test")[0]

    def _encoder_hyper(self) -> enc.EncoderHyper:
        return dataclasses.replace(self.cfg.encoder, seed=self.cfg.seed,
                                   use_motion=not self.cfg.switches.spatial_only_encoder_features)

    def train_encoder(self):
        hyper = self._encoder_hyper()

        def body(d):
            model, tlog = enc.train_encoder(self.train, hyper)
            r, valid = enc.temporal_correlation(model, self.test)
            model.save(d / "encoder", {"train_log": tlog.to_dict()})
            _write_json(d / "encoder_eval.json", {
                "test_r": r, "valid": valid, "median_test_r": float(np.median(r)),
                "train_log": tlog.to_dict()})

        key = {"sim": self.keys["simulate"], "align": self.keys["align"],
               "sel": self.keys["select-voxels"], "hyper": hyper}
        self.d_enc = self._stage("train-encoder", key, body, ("encoder", "encoder_eval.json"))
        self.encoder = self._memo("encoder", self.keys["train-encoder"],
                                  lambda: enc.EncoderModel.load(self.d_enc / "encoder").freeze())

    def significance(self):
        e = self.cfg.eval

        def body(d):
            rep = enc.encoder_significance(self.encoder, self.test, e.n_perm, e.block_len, e.alpha,
                                           seed=self.cfg.seed)
            _write_json(d / "significance.json", {**rep.to_dict(), "summary": rep.summary_line()})

        self.d_sig = self._stage("significance", {"enc": self.keys["train-encoder"], "n_perm": e.n_perm,
                                                  "block_len": e.block_len, "alpha": e.alpha},
                                 body, ("significance.json",))

    def _pools(self):
        dp = self.cfg.decoder
        key = stable_hash({"enc": self.keys["train-encoder"], "stride": dp.pool_stride,
                           "n_img": dp.n_synthetic_images, "frames": dp.synthetic_frames,
                           "seed": self.cfg.seed})

        def build():
            videos = [s.video for s in self.train]
            internal = dec.EncodedPool.build(self.encoder, videos, dp.pool_stride)
            speeds = sd.empirical_speed_range(videos, seed=self.cfg.seed)
            bank = sd.synthetic_clip_bank(dp.n_synthetic_images, dp.synthetic_frames, speeds, self.cfg.seed,
                                          window=videos[0].frame_shape[:2],
                                          frame_rate_hz=videos[0].frame_rate_hz)
            synthetic = dec.EncodedPool.build(self.encoder, [c for g in bank for c in g], dp.pool_stride)
            return internal, synthetic, speeds

        return self._memo("pools", key, build)

    def _decoder_switches(self) -> dec.Switches:
        sw = self.cfg.switches
        return dec.Switches(sw.supervised_only, sw.no_consistency, sw.synthetic_only_ssl)

    def train_decoders(self):
        dp, sw = self.cfg.decoder, self._decoder_switches()
        h05 = dataclasses.replace(dp.hyper_05, seed=self.cfg.seed)
        base = {"enc": self.keys["train-encoder"], "stride": dp.pool_stride, "n_img": dp.n_synthetic_images,
                "frames": dp.synthetic_frames, "sup_only": sw.supervised_only,
                "syn_only": sw.synthetic_only_ssl}

        def body05(d):
            internal, synthetic, _ = self._pools()
            model, tlog = dec.train_decoder(self.encoder, self.train, internal, synthetic,
                                            weights=dp.weights_05, hyper=h05, switches=sw)
            model.save(d / "decoder", {"train_log": tlog.to_dict()})
            _write_json(d / "train_log.json", tlog.to_dict())

        self.d_dec05 = self._stage("train-decoder", {**base, "mode": "rate_0p5hz", "hyper": h05,
                                                     "weights": dp.weights_05},
                                   body05, ("decoder", "train_log.json"))
        self.keys["decoder_05"] = self.keys["train-decoder"]
        self.decoder_05 = self._memo("decoder", self.keys["decoder_05"],
                                     lambda: dec.DecoderModel.load(self.d_dec05 / "decoder"))

        self.d_hfr = self.decoder_hfr = None
        if not dp.train_hfr or self.cfg.switches.interp_baseline:
            return
        hh = dataclasses.replace(dp.hyper_hfr, seed=self.cfg.seed)
        prior_key = None
        if dp.use_temporal_prior:
            ph = dataclasses.replace(dp.prior, seed=self.cfg.seed)

            def body_prior(d):
                net, acc = dec.train_temporal_prior([s.video for s in self.train], ph)
                from .checkpoint import save_module
                save_module(net, d / "prior", {"kind": "temporal_prior", "val_acc": acc})
                _write_json(d / "prior.json", {"val_acc": acc})

            d_prior = self._stage("train-prior", {"sim": self.keys["simulate"], "prior": ph}, body_prior,
                                  ("prior",))
            prior_key = self.keys["train-prior"]

        def load_prior():
            from .checkpoint import load_state
            net = dec.TemporalPriorNet(self.manifest_channels(), ph.seed)
            load_state(net, d_prior / "prior")
            for p in net.parameters():
                p.requires_grad_(False)
            return net.eval()

        prior = self._memo("prior", prior_key, load_prior) if prior_key else None

        def body_hfr(d):
            internal, synthetic, _ = self._pools()
            model, tlog = dec.train_decoder(self.encoder, self.train, internal, synthetic, mode="hfr",
                                            n_frames=dp.hfr_frames, weights=dp.weights_hfr, hyper=hh,
                                            switches=sw, prior=prior)
            model.save(d / "decoder", {"train_log": tlog.to_dict()})
            _write_json(d / "train_log.json", tlog.to_dict())

        self.d_hfr = self._stage("train-decoder", {**base, "mode": "hfr", "hyper": hh, "n": dp.hfr_frames,
                                                   "weights": dp.weights_hfr, "no_cons": sw.no_consistency,
                                                   "prior": prior_key},
                                 body_hfr, ("decoder", "train_log.json"))
        self.keys["decoder_hfr"] = self.keys["train-decoder"]
        self.decoder_hfr = self._memo("decoder", self.keys["decoder_hfr"],
                                      lambda: dec.DecoderModel.load(self.d_hfr / "decoder"))

    def manifest_channels(self) -> int:
        return self.test.video.frame_shape[2]

    def _hfr_mid_indices(self) -> np.ndarray:
        """Test-video frame index halfway between consecutive clip middles."""
        k = self.test.frames_per_tr
        return np.arange(self.test.n_pairs - 1) * k + k // 2 + k // 2

    def reconstruct(self):
        def body(d):
            r05 = dec.reconstruct_05(self.decoder_05, self.test)
            blobs.save(d / "recon_05.nvrd", r05.frames)
            _write_json(d / "recon_05.json", r05.timing())
            if self.decoder_hfr is not None:
                rh = dec.reconstruct_hfr(self.decoder_hfr, self.test)
                blobs.save(d / "recon_hfr.nvrd", rh.frames)
                _write_json(d / "recon_hfr.json", rh.timing())
                mids = dec.decode_consecutive(self.decoder_hfr, self.test)[:, 1:-1]
                blobs.save(d / "hfr_inner.nvrd", mids)
                blobs.save(d / "overlap_discrepancy.nvrd", dec.overlap_discrepancy(self.decoder_hfr, self.test))

        key = {"d05": self.keys["decoder_05"], "hfr": self.keys.get("decoder_hfr") if self.decoder_hfr else None}
        self.d_rec = self._stage("reconstruct", key, body, ("recon_05.nvrd", "recon_05.json"))

    def evaluate(self):
        e = self.cfg.eval
        arm = self.arm

        def body(d):
            test = self.test
            rate = test.video.frame_rate_hz
            stack = fe.make_extractor(fe.eval_spec(input_shape=test.video.frame_shape))
            pool = ev.build_distractor_pool(test.video.frames, e.m, e.distractor_spacing, rate)
            rec05 = blobs.load(self.d_rec / "recon_05.nvrd")
            gt05 = test.mid_frames()
            id05 = ev.identification_test(rec05, gt05, pool, stack, e.n, e.m, self.cfg.seed,
                                          gt_times=test.mid_frame_times())
            out = {"arm": arm, "seed": self.cfg.seed, "symbol": ARM_SYMBOLS[arm],
                   "rate_0p5hz": {"identification": id05.to_dict(),
                                  "metrics": ev.mean_frame_metrics(rec05, gt05)}}
            mid_idx = self._hfr_mid_indices()
            gt_mid = test.video.frames[mid_idx]
            mid = None
            if self.cfg.switches.interp_baseline:
                mid = ev.interpolation_baseline(rec05, 2)[1::2]
                source = "interpolation"
            elif (self.d_rec / "hfr_inner.nvrd").exists():
                inner = blobs.load(self.d_rec / "hfr_inner.nvrd")
                mid = inner[:, inner.shape[1] // 2]
                source = "hfr"
                disc = blobs.load(self.d_rec / "overlap_discrepancy.nvrd")
                out["overlap_discrepancy"] = {"mean": float(disc.mean()), "per_frame": disc}
            if mid is not None:
                idm = ev.identification_test(mid, gt_mid, pool, stack, e.n, e.m, self.cfg.seed,
                                             gt_times=mid_idx / rate)
                out["hfr_mid"] = {"source": source, "identification": idm.to_dict(),
                                  "metrics": ev.mean_frame_metrics(mid, gt_mid)}
            sig = _read_json(self.d_sig / "significance.json")
            out["significance"] = {"n_significant": sig["n_significant"], "n_voxels": len(sig["r"]),
                                   "summary": sig["summary"]}
            out["encoder"] = {"median_test_r": _read_json(self.d_enc / "encoder_eval.json")["median_test_r"]}
            _write_json(d / "metrics.json", out)

        key = {"rec": self.keys["reconstruct"], "sig": self.keys["significance"], "eval": e,
               "arm": arm, "seed": self.cfg.seed}
        self.d_eval = self._stage("evaluate", key, body, ("metrics.json",))
        metrics = _read_json(self.d_eval / "metrics.json")
        self.out.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(self.d_eval / "metrics.json", self.out / "metrics.json")
        self.record.metrics = summarize(metrics)
        return metrics

    def report(self):
        from .report import write_report

        self._save_record()
        write_report(self.out)

    # ------------------------------------------------------------------

    def run(self, until: str = "report") -> RunRecord:
        if until not in STAGES:
            raise ValueError(f"unknown stage {until!r}; choose from {STAGES}")
        steps = [("simulate", self.simulate), ("align", self.align), ("select-voxels", self.select_voxels),
                 ("train-encoder", self.train_encoder), ("significance", self.significance),
                 ("train-decoder", self.train_decoders), ("reconstruct", self.reconstruct),
                 ("evaluate", self.evaluate), ("report", self.report)]
        self.out.mkdir(parents=True, exist_ok=True)
        with _Lock(self.out / ".lock"):
            self.cfg.save(self.out / "config.json")
            for name, fn in steps:
                log.info("[%s] stage %s", self.arm, name)
                try:
                    fn()
                except StageFailure:
                    raise
                except Exception as e:  # failures outside a cached body (loading, copying)
                    self.record.append(stage=name, status="failed", error=f"{type(e).__name__}: {e}")
                    self._save_record()
                    raise StageFailure(name, e) from e
                if name == until:
                    break
            self._save_record()
        return self.record


def summarize(metrics: dict) -> dict:
    """Flat headline numbers of a metrics document."""
    out = {"arm": metrics["arm"], "seed": metrics["seed"],
           "rank_0p5hz": metrics["rate_0p5hz"]["identification"]["mean_rank"],
           "ssim_0p5hz": metrics["rate_0p5hz"]["metrics"]["ssim"],
           "mse_0p5hz": metrics["rate_0p5hz"]["metrics"]["mse"],
           "significant_voxels": metrics["significance"]["n_significant"],
           "median_test_r": metrics["encoder"]["median_test_r"]}
    if "hfr_mid" in metrics:
        out["rank_hfr_mid"] = metrics["hfr_mid"]["identification"]["mean_rank"]
    if "overlap_discrepancy" in metrics:
        out["overlap_discrepancy"] = metrics["overlap_discrepancy"]["mean"]
    return out


def run_pipeline(config: ExperimentConfig, resume: bool = True, until: str = "report") -> RunRecord:
    return Pipeline(config, resume).run(until)


# --------------------------------------------------------------------------
# Ablation matrix
# --------------------------------------------------------------------------

def run_ablation_matrix(base: ExperimentConfig, arms, seeds=(0, 1, 2), resume: bool = True) -> dict:
    """Run every (arm, seed) with a shared stage cache and compare arms.

    Returns the comparison document; it is also written as ``ablation.json``
    and ``ablation.md`` under ``base.output_dir``.
    """
    arms = list(arms)
    for a in arms:
        Switches.for_arm(a)  # raises on unknown names
    out = Path(base.output_dir)
    cache = str(base.cache_root)
    per_arm: dict[str, list[dict]] = {}
    for arm in arms:
        for seed in seeds:
            cfg = base.replace(switches=Switches.for_arm(arm), seed=seed, cache_dir=cache,
                               output_dir=str(out / "ablation" / arm / f"seed{seed}"))
            p = Pipeline(cfg, resume)
            p.run("evaluate")
            per_arm.setdefault(arm, []).append(_read_json(p.out / "metrics.json"))
    table = compare_arms(per_arm, reference=arms[0])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "ablation.json", table)
    (out / "ablation.md").write_text(ablation_markdown(table))
    return table


def _ranks(runs: list[dict], field_: str) -> list[int] | None:
    if not all(field_ in r for r in runs):
        return None
    return [x for r in runs for x in r[field_]["identification"]["ranks"]]


def compare_arms(per_arm: dict[str, list[dict]], reference: str = "full") -> dict:
    rows = []
    ref = per_arm.get(reference)
    for arm, runs in per_arm.items():
        row = {"arm": arm, "symbol": ARM_SYMBOLS[arm], "seeds": [r["seed"] for r in runs]}
        for fld in ("rate_0p5hz", "hfr_mid"):
            ranks = _ranks(runs, fld)
            if ranks is None:
                continue
            row[fld] = {
                "mean_rank": float(np.mean(ranks)),
                "per_seed_mean_rank": [r[fld]["identification"]["mean_rank"] for r in runs],
                "ssim": float(np.mean([r[fld]["metrics"]["ssim"] for r in runs])),
                "mse": float(np.mean([r[fld]["metrics"]["mse"] for r in runs])),
            }
            ref_ranks = _ranks(ref, fld) if ref is not None else None
            if ref_ranks is not None and arm != reference:
                rs = ev.wilcoxon_rank_sums(ref_ranks, ranks)
                row[fld]["vs_reference"] = {"rank_sums": rs._asdict()}
                if len(ref_ranks) == len(ranks):
                    sr = ev.wilcoxon_signed_rank(np.subtract(ref_ranks, ranks))
                    row[fld]["vs_reference"]["signed_rank"] = sr._asdict()
        if all("overlap_discrepancy" in r for r in runs):
            row["overlap_discrepancy"] = {
                "mean": float(np.mean([r["overlap_discrepancy"]["mean"] for r in runs])),
                "per_seed": [r["overlap_discrepancy"]["mean"] for r in runs]}
        rows.append(row)
    return {"reference": reference, "rows": rows}


def _fmt(x, spec=".3f"):
    return "-" if x is None else format(x, spec)


def ablation_markdown(table: dict) -> str:
    lines = [f"Reference arm: {table['reference']}. Lower rank is better (n-way identification).", "",
             "| arm | symbol | rank 0.5 Hz | SSIM 0.5 Hz | MSE 0.5 Hz | rank HFR mid | overlap discrepancy "
             "| rank-sums p (0.5 Hz) | rank-sums p (HFR mid) |",
             "|---|---|---|---|---|---|---|---|---|"]
    for r in table["rows"]:
        a, h = r.get("rate_0p5hz", {}), r.get("hfr_mid", {})
        p05 = a.get("vs_reference", {}).get("rank_sums", {}).get("pvalue")
        ph = h.get("vs_reference", {}).get("rank_sums", {}).get("pvalue")
        lines.append(f"| {r['arm']} | {r['symbol']} | {_fmt(a.get('mean_rank'))} | {_fmt(a.get('ssim'))} "
                     f"| {_fmt(a.get('mse'), '.4f')} | {_fmt(h.get('mean_rank'))} "
                     f"| {_fmt(r.get('overlap_discrepancy', {}).get('mean'))} | {_fmt(p05, '.4g')} "
                     f"| {_fmt(ph, '.4g')} |")
    return "\n".join(lines) + "\n"
