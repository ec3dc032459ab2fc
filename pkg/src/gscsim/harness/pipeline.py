"""Stage orchestration: checkpoints, manifest, and per-stage metric CSVs under one output directory.

Layout of ``out``::

    manifest.json          run id, root seed, config snapshot, stage completion markers
    checkpoints/<name>.ckpt
    metrics/<stage>.csv
    plots/*.svg, demo.png
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .. import channel as ch
from .. import deka as K
from .. import genmodel as G
from .. import jscc as J
from .. import metrics as M
from .. import nn
from . import data as D
from . import report
from .checkpoint import load_arrays, prefixed, save_arrays
from .config import ExperimentConfig, dumps
from .seeds import derive_seed, seed_list, stage_rng

log = logging.getLogger("gscsim")

NA = float("nan")

# artifact -> producing stage
PRODUCER = {
    "data": "synth-data",
    "latent_codec": "pretrain-latent-codec",
    "cloud": "train-cloud",
    "edge": "train-edge",
    "jscc": "pretrain-jscc",
    "gka": "gka",
    "tka_rate": "tka-rate",
    "tka_snr": "tka-snr",
}
REQUIRES = {
    "synth-data": (),
    "pretrain-latent-codec": ("data",),
    "train-cloud": ("data", "latent_codec"),
    "train-edge": ("data", "latent_codec"),
    "pretrain-jscc": ("data", "latent_codec"),
    "gka": ("latent_codec", "cloud", "edge"),
    "tka-rate": ("jscc", "gka"),
    "tka-snr": ("jscc", "gka", "tka_rate"),
    "eval": ("latent_codec", "jscc", "gka", "tka_rate", "tka_snr"),
    "transmit-demo": ("latent_codec", "edge", "jscc", "gka", "tka_rate", "tka_snr"),
    "plot": (),
}
STAGES = tuple(REQUIRES)
GKA_CLI = {"makd": "MAKD", "ti": "TI_ONLY", "db": "DB_ONLY"}
RATE_CLI = {m.lower().replace("_", "-"): m for m in K.RATE_MODES}


class StageError(RuntimeError):
    pass


class MissingCheckpoint(StageError):
    def __init__(self, artifact: str, stage: str):
        producer = PRODUCER[artifact]
        super().__init__(f"stage {stage!r} needs the {artifact!r} checkpoint, which is produced by "
                         f"stage {producer!r}; run `gscsim {producer}` first")
        self.artifact = artifact
        self.producer = producer


def _config_digest(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _progress(stage: str, total: int):
    every = max(1, total // 10)

    def cb(epoch, *rest):
        if epoch % every == 0 or epoch == total - 1:
            log.info("%s: epoch %d/%d loss %.5g", stage, epoch + 1, total, rest[-1])

    return cb


@dataclass
class GkaSubject:
    spec: D.SubjectSpec
    result: K.GkaResult
    latents_train: np.ndarray
    latents_test: np.ndarray


class Pipeline:
    def __init__(self, cfg: ExperimentConfig, out):
        self.cfg = cfg
        self.out = Path(out)
        self.root = int(cfg.run.seed)
        self.run_id = cfg.run.run_id
        self.sched = cfg.schedule()
        self.C = cfg.constellation()
        self._config_text = dumps(cfg)

    # -- bookkeeping ----------------------------------------------------------------------------
    @property
    def manifest_path(self) -> Path:
        return self.out / "manifest.json"

    def manifest(self) -> dict:
        if self.manifest_path.exists():
            return json.loads(self.manifest_path.read_text())
        return {"run_id": self.run_id, "root_seed": self.root, "config_digest": _config_digest(self._config_text),
                "config": self._config_text, "stages": []}

    def _check_manifest(self) -> dict:
        m = self.manifest()
        if m["root_seed"] != self.root or m["config_digest"] != _config_digest(self._config_text):
            raise StageError(f"{self.out} holds a run with a different root seed or config; use a fresh --out")
        return m

    def completed(self) -> set[str]:
        return {e["stage"] for e in self.manifest()["stages"]}

    def _mark(self, stage: str, outputs: list[str], extra: dict | None = None) -> None:
        m = self._check_manifest()
        entry = {"stage": stage, "inputs": list(REQUIRES[stage]), "outputs": outputs}
        entry.update(extra or {})
        m["stages"].append(entry)
        tmp = self.manifest_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")
        tmp.replace(self.manifest_path)

    def ckpt_path(self, artifact: str) -> Path:
        return self.out / "checkpoints" / f"{artifact}.ckpt"

    def csv_path(self, stage: str) -> Path:
        return self.out / "metrics" / f"{stage}.csv"

    def _begin(self, stage: str) -> None:
        self._check_manifest()
        done = self.completed()
        for art in REQUIRES[stage]:
            if PRODUCER[art] not in done or not self.ckpt_path(art).exists():
                raise MissingCheckpoint(art, stage)
        for sub in ("checkpoints", "metrics"):
            (self.out / sub).mkdir(parents=True, exist_ok=True)
        log.info("stage %s: start", stage)

    def _finish(self, stage: str, records: list, artifact: str | None = None, arrays=None, meta=None,
                extra: dict | None = None) -> None:
        outputs = []
        if artifact is not None:
            save_arrays(self.ckpt_path(artifact), arrays, {"stage": stage, **(meta or {})})
            outputs.append(str(self.ckpt_path(artifact).relative_to(self.out)))
        report.export_csv(records, self.csv_path(stage))
        outputs.append(str(self.csv_path(stage).relative_to(self.out)))
        self._mark(stage, outputs, extra)
        log.info("stage %s: done", stage)

    def _rec(self, stage, metric, value, epoch=-1, rate_index=-1, snr_db=NA, delay_ns=NA, seed=None):
        return M.MetricRecord(self.run_id, stage, int(epoch), int(rate_index), float(snr_db), float(delay_ns),
                              metric, float(value), self.root if seed is None else int(seed))

    def _load(self, artifact: str) -> tuple[dict, dict]:
        return load_arrays(self.ckpt_path(artifact))

    # -- loaders --------------------------------------------------------------------------------
    def load_data(self):
        a, _ = self._load("data")
        return a["cloud_images"], a["cloud_tokens"], a["edge_images"], a["edge_tokens"]

    def load_latent_codec(self) -> G.LatentCodec:
        codec = G.LatentCodec(np.random.default_rng(0), widths=self.cfg.latent_codec.widths,
                              image_size=self.cfg.data.image_size)
        codec.load_state_dict(self._load("latent_codec")[0])
        return codec

    def _predictor(self, width: int) -> G.NoisePredictor:
        d = self.cfg.diffusion
        return G.NoisePredictor(np.random.default_rng(0), len(D.VOCAB), width=width, embed_dim=d.embed_dim)

    def load_predictor(self, which: str) -> G.NoisePredictor:
        d = self.cfg.diffusion
        model = self._predictor(d.cloud_width if which == "cloud" else d.edge_width)
        model.load_state_dict(self._load(which)[0])
        return model

    def _jscc_codec(self) -> J.JsccCodec:
        return J.JsccCodec(np.random.default_rng(0), width=self.cfg.jscc.width,
                           latent_size=self.cfg.data.image_size // 4)

    def load_jscc(self) -> J.JsccCodec:
        codec = self._jscc_codec()
        codec.load_state_dict(self._load("jscc")[0])
        return codec

    def load_gka(self) -> list[GkaSubject]:
        arrays, meta = self._load("gka")
        out = []
        for i, spec in enumerate(self.cfg.subjects()):
            sub = prefixed(arrays, f"subject{i}")
            if not sub:
                raise StageError(f"gka checkpoint has no entries for subject {i} ({spec.prompt})")
            lora = nn.lora_from_state(prefixed(sub, "lora"))
            res = K.GkaResult(nn.MetaWord(sub["metaword"]), lora)
            out.append(GkaSubject(spec, res, sub["latents_train"], sub["latents_test"]))
        return out

    def edge_latents(self, subjects: list[GkaSubject] | None = None) -> tuple[np.ndarray, np.ndarray]:
        subjects = subjects or self.load_gka()
        return (np.concatenate([s.latents_train for s in subjects]),
                np.concatenate([s.latents_test for s in subjects]))

    def load_tka(self, with_groups: bool = True) -> K.TkaResult:
        arrays, meta = self._load("tka_rate")
        tcfg = self.cfg.tka_config(meta["rate_mode"])
        link = K.make_link(self._jscc_codec(), tcfg.plan, tcfg.rate_mode, np.random.default_rng(0))
        link.load_state_dict(arrays)
        result = K.TkaResult(link, tcfg)
        if with_groups:
            garr, _ = self._load("tka_snr")
            for g in range(len(tcfg.groups)):
                sub = prefixed(garr, f"group{g}")
                if sub:
                    result.group_loras[g] = nn.lora_from_state(sub)
        return result

    # -- stages ---------------------------------------------------------------------------------
    def synth_data(self):
        stage = "synth-data"
        self._begin(stage)
        n, size = self.cfg.data.images_per_style, self.cfg.data.image_size
        specs = D.all_specs()
        xc, tc = D.synth_dataset(specs, "cloud", n, derive_seed(self.root, stage, 0), size)
        xe, te = D.synth_dataset(specs, "edge", n, derive_seed(self.root, stage, 1), size)
        records = [self._rec(stage, "cloud_images", len(xc)), self._rec(stage, "edge_images", len(xe))]
        self._finish(stage, records, "data",
                     {"cloud_images": xc, "cloud_tokens": tc, "edge_images": xe, "edge_tokens": te})
        return xc, tc, xe, te

    def pretrain_latent_codec(self):
        stage = "pretrain-latent-codec"
        self._begin(stage)
        xc, _, xe, _ = self.load_data()
        x = np.concatenate([xc, xe])
        rng = stage_rng(self.root, stage)
        lc = self.cfg.latent_codec
        codec = G.LatentCodec(rng, widths=lc.widths, image_size=self.cfg.data.image_size)
        hist = G.train_latent_codec(codec, x, self.cfg.codec_train(), rng, _progress(stage, lc.epochs))
        scale = G.calibrate_latent_scale(codec, x)
        recon = G.decode_latent(codec, G.latent_means(codec, x))
        records = [self._rec(stage, "loss", v, epoch=e) for e, v in enumerate(hist)]
        records += [self._rec(stage, "latent_scale", scale),
                    self._rec(stage, "recon_psnr", float(np.mean(M.psnr_per_image(x, recon))))]
        self._finish(stage, records, "latent_codec", codec.state_dict())
        return codec

    def _train_predictor(self, stage: str, which: str):
        self._begin(stage)
        xc, tc, xe, te = self.load_data()
        x, tok = (xc, tc) if which == "cloud" else (xe, te)
        codec = self.load_latent_codec()
        rng = stage_rng(self.root, stage)
        z = G.encode_latent(codec, x, rng)
        d = self.cfg.diffusion
        model = G.NoisePredictor(rng, len(D.VOCAB), width=d.cloud_width if which == "cloud" else d.edge_width,
                                 embed_dim=d.embed_dim)
        hist = G.train_noise_predictor(model, z, tok, self.sched, self.cfg.diffusion_train(), rng,
                                       log=_progress(stage, d.epochs))
        records = [self._rec(stage, "loss", v, epoch=e) for e, v in enumerate(hist)]
        self._finish(stage, records, which, model.state_dict())
        return model

    def train_cloud(self):
        return self._train_predictor("train-cloud", "cloud")

    def train_edge(self):
        return self._train_predictor("train-edge", "edge")

    def pretrain_jscc(self):
        stage = "pretrain-jscc"
        self._begin(stage)
        _, _, xe, _ = self.load_data()
        codec = self.load_latent_codec()
        rng = stage_rng(self.root, stage)
        z = G.encode_latent(codec, xe, rng)
        jc = J.JsccCodec(rng, width=self.cfg.jscc.width, latent_size=self.cfg.data.image_size // 4)
        cond = self.cfg.channel_condition()
        hist = J.train_jscc(jc, z, self.cfg.objective(), cond, self.cfg.jscc_train(), rng, self.C,
                            _progress(stage, self.cfg.jscc.epochs))
        tcond = ch.TransmissionCondition(Fraction(z[0].size, jc.K), cond, z[0].size)
        mse = J.evaluate_mse(jc.encode, jc.decode, z, tcond, stage_rng(self.root, stage, 1), 1, self.C)
        records = [self._rec(stage, "loss", v, epoch=e) for e, v in enumerate(hist)]
        records.append(self._rec(stage, "latent_mse", mse, snr_db=cond.snr_db, delay_ns=self.cfg.jscc.delay0_ns))
        self._finish(stage, records, "jscc", jc.state_dict())
        return jc

    def gka(self, mode: str | None = None) -> list[GkaSubject]:
        stage = "gka"
        self._begin(stage)
        gcfg = self.cfg.gka_config(mode)
        codec = self.load_latent_codec()
        cloud, edge = self.load_predictor("cloud"), self.load_predictor("edge")
        probes = [M.VisualProbe(), M.SemanticProbe(codec)]
        g = self.cfg.gka
        T_B = self.cfg.diffusion.T_B
        records, arrays, subjects = [], {}, []
        for i, spec in enumerate(self.cfg.subjects()):
            tokens = spec.tokens()
            rng = stage_rng(self.root, stage, i)
            seeds = seed_list(self.root, f"cloud-samples/{i}", gcfg.n_cg + gcfg.n_cg_test)
            s_cg = K.cloud_generate_samples(cloud, codec, tokens, seeds, self.sched, T_B)
            train, test = s_cg[:gcfg.n_cg], s_cg[gcfg.n_cg:]

            def logger(sub_stage, epoch, value, i=i):
                records.append(self._rec(stage, f"subject{i}/{sub_stage}_loss", value, epoch=epoch))

            result = K.run_gka(edge, codec, train, tokens, self.sched, gcfg, rng, log=logger)
            eval_noise = G.seed_noise(seed_list(self.root, f"gka-eval/{i}", gcfg.n_cg_test), codec.latent_shape)
            arms = {"ub": test,
                    "lb": G.decode_latent(codec, G.generate(edge, tokens, eval_noise, self.sched, T_B)),
                    gcfg.mode.lower(): G.decode_latent(codec, G.generate(edge, tokens, eval_noise, self.sched, T_B,
                                                                         result.metaword, result.lora or None))}
            for arm, images in arms.items():
                for key, value in M.align_eval(images, test, probes).items():
                    records.append(self._rec(stage, f"subject{i}/{arm}/{key}", value))
            n_eg, n_test = g.n_eg, g.n_eg_test
            z_eg = K.generate_edge_latents(edge, result, tokens, seed_list(self.root, f"edge-latents/{i}",
                                                                           n_eg + n_test),
                                           self.sched, T_B, codec.latent_shape)
            arrays[f"subject{i}.metaword"] = result.metaword.embedding.data
            for k, v in nn.lora_state(result.lora).items():
                arrays[f"subject{i}.lora.{k}"] = v
            arrays[f"subject{i}.latents_train"] = z_eg[:n_eg]
            arrays[f"subject{i}.latents_test"] = z_eg[n_eg:]
            subjects.append(GkaSubject(spec, result, z_eg[:n_eg], z_eg[n_eg:]))
            log.info("gka: subject %d (%s) done", i, spec.prompt)
        self._finish(stage, records, "gka", arrays, {"mode": gcfg.mode}, {"mode": gcfg.mode})
        return subjects

    def _rate_mse_records(self, stage: str, result: K.TkaResult, latents: np.ndarray) -> list:
        cfg = result.cfg
        out = []
        for p in range(len(cfg.plan)):
            rng = stage_rng(self.root, f"{stage}/mse", p)
            z_rx = K.link_transmit(result, latents, p, cfg.pretrain_condition, rng, self.C)
            out.append(self._rec(stage, "latent_mse", M.latent_mse(latents, z_rx), rate_index=p,
                                 snr_db=cfg.snr0_db, delay_ns=cfg.delay0_ns))
        return out

    def tka_rate(self, mode: str | None = None) -> K.TkaResult:
        stage = "tka-rate"
        self._begin(stage)
        tcfg = self.cfg.tka_config(mode)
        train, test = self.edge_latents()
        records = []

        def logger(epoch, p, value):
            records.append(self._rec(stage, "loss", value, epoch=epoch, rate_index=p, snr_db=tcfg.snr0_db,
                                     delay_ns=tcfg.delay0_ns))

        rng = stage_rng(self.root, stage)
        result = K.vgsa_rate_stage(self.load_jscc(), train, tcfg, rng, self.C, logger)
        records += self._rate_mse_records(stage, result, test)
        self._finish(stage, records, "tka_rate", result.link.state_dict(), {"rate_mode": tcfg.rate_mode},
                     {"mode": tcfg.rate_mode})
        return result

    def tka_snr(self) -> K.TkaResult:
        stage = "tka-snr"
        self._begin(stage)
        result = self.load_tka(with_groups=False)
        train, test = self.edge_latents()
        records = []

        def logger(epoch, g, value):
            records.append(self._rec(stage, f"group{g}/loss", value, epoch=epoch))

        K.vgsa_snr_stage(result, train, stage_rng(self.root, stage), self.C, logger)
        arrays = {}
        for g, lset in sorted(result.group_loras.items()):
            for k, v in nn.lora_state(lset).items():
                arrays[f"group{g}.{k}"] = v
        self._finish(stage, records, "tka_snr", arrays, {"groups": sorted(result.group_loras)})
        return result

    def evaluate(self, grid: bool = False) -> list[M.MetricRecord]:
        """PSNR over (rate, SNR[, delay spread]) with and without the group LoRA.

        Channel draws for a cell depend on (rate, delay spread, trial) but not on
        the SNR, so SNR sweeps compare the same fading realizations.
        """
        stage = "eval"
        self._begin(stage)
        codec = self.load_latent_codec()
        result = self.load_tka()
        bare = K.TkaResult(result.link, result.cfg)
        _, test = self.edge_latents()
        reference = G.decode_latent(codec, test)
        cfg = result.cfg
        delays = cfg.delay_spreads_ns if grid else (cfg.delay0_ns,)
        records = []
        for p in range(len(cfg.plan)):
            for w in delays:
                for snr in cfg.snr_set_db:
                    cond = cfg.condition(snr, w)
                    cell = {"psnr": [], "psnr_noadapt": [], "latent_mse": []}
                    for trial in range(self.cfg.eval.trials):
                        seed = derive_seed(self.root, f"eval/p{p}/w{w:g}", trial)
                        z_rx = K.link_transmit(result, test, p, cond, np.random.default_rng(seed), self.C)
                        z_na = K.link_transmit(bare, test, p, cond, np.random.default_rng(seed), self.C)
                        cell["psnr"].append(np.mean(M.psnr_per_image(reference, G.decode_latent(codec, z_rx))))
                        cell["psnr_noadapt"].append(np.mean(M.psnr_per_image(reference,
                                                                             G.decode_latent(codec, z_na))))
                        cell["latent_mse"].append(M.latent_mse(test, z_rx))
                    for metric, vals in cell.items():
                        records.append(self._rec(stage, metric, float(np.mean(vals)), rate_index=p, snr_db=snr,
                                                 delay_ns=w))
        self._finish(stage, records, extra={"grid": grid})
        return records

    def transmit_demo(self, subject: int = 0, rate_index: int = 0, snr_db: float | None = None,
                      delay_ns: float | None = None, count: int = 6) -> Path:
        stage = "transmit-demo"
        self._begin(stage)
        codec = self.load_latent_codec()
        edge = self.load_predictor("edge")
        subjects = self.load_gka()
        if not 0 <= subject < len(subjects):
            raise StageError(f"subject index {subject} out of range (have {len(subjects)})")
        result = self.load_tka()
        cfg = result.cfg
        snr = cfg.snr_set_db[0] if snr_db is None else snr_db
        cond = cfg.condition(snr, cfg.delay0_ns if delay_ns is None else delay_ns)
        sub = subjects[subject]
        seeds = seed_list(self.root, stage, count)
        sent = G.decode_latent(codec, K.generate_edge_latents(edge, sub.result, sub.spec.tokens(), seeds,
                                                              self.sched, self.cfg.diffusion.T_B,
                                                              codec.latent_shape))
        received = K.gsc_forward(edge, codec, sub.result, result, sub.spec.tokens(), seeds, rate_index, cond,
                                 self.sched, self.cfg.diffusion.T_B, stage_rng(self.root, stage, 1), self.C)
        (self.out / "plots").mkdir(exist_ok=True)
        png = self.out / "plots" / "demo.png"
        report.save_image_grid(png, np.concatenate([sent, received]), count)
        records = [self._rec(stage, "psnr", float(np.mean(M.psnr_per_image(sent, received))),
                             rate_index=rate_index, snr_db=cond.snr_db, delay_ns=cond.delay_spread_s * 1e9)]
        self._finish(stage, records, extra={"image": str(png.relative_to(self.out))})
        return png

    def plot(self) -> list[Path]:
        stage = "plot"
        self._begin(stage)
        if "eval" not in self.completed() or not self.csv_path("eval").exists():
            raise StageError("stage 'plot' needs metrics from stage 'eval'; run `gscsim eval` first")
        plots = self.out / "plots"
        plots.mkdir(exist_ok=True)
        ev = report.read_csv(self.csv_path("eval"))
        made = []
        specs = {
            "psnr_vs_snr.svg": report.PlotSpec("line", "psnr", "snr_db", "rate_index", "PSNR with SNR-group LoRA",
                                               "SNR (dB)", "PSNR (dB)"),
            "psnr_noadapt_vs_snr.svg": report.PlotSpec("line", "psnr_noadapt", "snr_db", "rate_index",
                                                       "PSNR without adaptation", "SNR (dB)", "PSNR (dB)"),
            "psnr_by_rate.svg": report.PlotSpec("box", "psnr", series="rate_index", title="PSNR across conditions",
                                                xlabel="rate index", ylabel="PSNR (dB)"),
        }
        for name, spec in specs.items():
            report.export_svg_plot(ev, spec, plots / name)
            made.append(plots / name)
        if self.csv_path("tka-rate").exists():
            tr = report.read_csv(self.csv_path("tka-rate"))
            spec = report.PlotSpec("line", "loss", "epoch", "rate_index", "Rate-stage training loss", "epoch",
                                   "loss")
            report.export_svg_plot(tr, spec, plots / "rate_stage_loss.svg")
            made.append(plots / "rate_stage_loss.svg")
        self._finish(stage, [], extra={"plots": [str(p.relative_to(self.out)) for p in made]})
        return made


def run_deka(pipe: Pipeline, gka_mode: str | None = None, rate_mode: str | None = None):
    """Alignment stages in order: cloud samples, metaword, LoRA and edge latents, rate stage, SNR groups.

    Needs the pretrained latent codec, cloud and edge predictors, and JSCC codec.
    Returns the per-subject generation results, the transmission result, and all metric records.
    """
    subjects = pipe.gka(gka_mode)
    pipe.tka_rate(rate_mode)
    tka = pipe.tka_snr()
    records = []
    for stage in ("gka", "tka-rate", "tka-snr"):
        records += report.read_csv(pipe.csv_path(stage))
    return subjects, tka, records
