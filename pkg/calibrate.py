"""Scratch calibration: full default pipeline + acceptance-relevant numbers."""
import json
import time

import numpy as np

from flowconvert import *
from flowconvert.attention import denoising_metrics, train_attention
from flowconvert.config import RunConfig
from flowconvert.duration import duration_mae, train_duration_model
from flowconvert.evaluation import evaluate_systems, train_classifiers, render_report_text
from flowconvert.flow import train_flow
from flowconvert.pipeline import ModelBundle

t_all = time.time()
rc = RunConfig()
corpus = generate_corpus(rc.corpus, rc.seed)
print(f"corpus: {len(corpus.utterances)} utts, "
      f"{ {s: len(corpus.split(s)) for s in ('train','calib','test')} }", flush=True)

t0 = time.time(); fl = train_flow(corpus, rc, rc.seed)
print(f"flow: {time.time()-t0:.0f}s initial={fl.initial_nll:.3f} final={fl.final_nll:.3f}", flush=True)

t0 = time.time(); du = train_duration_model(corpus, rc, rc.seed)
print(f"duration: {time.time()-t0:.0f}s mae={du.heldout_mae:.3f} mean={du.heldout_mean_duration:.3f}", flush=True)

t0 = time.time(); at = train_attention(corpus, fl.stack, fl.flow, rc, rc.seed)
print(f"attention: {time.time()-t0:.0f}s denoise={at.heldout_denoise_mse:.4f} "
      f"corrupt={at.heldout_corrupt_mse:.4f} entropy={at.mean_entropy:.3f}", flush=True)

t0 = time.time(); clf = train_classifiers(corpus, rc, rc.seed)
print(f"classifiers: {time.time()-t0:.0f}s", flush=True)

# classifier sanity
test = corpus.split("test")
acc_ok = np.mean([classify(u.mel, clf["accent"]) == u.accent_id for u in test])
spk_ok = np.mean([classify(u.mel, clf["speaker"]) == u.speaker_id for u in test])
own_sim = np.mean([similarity_score(u.mel, clf["accent"], u.accent_id) for u in test])
pers = [wer(np.repeat(u.phoneme_seq.phonemes, 1).tolist(), phoneme_decode(u.mel, clf["phoneme"])) for u in test]
print(f"real-data: accent acc={acc_ok:.3f} speaker acc={spk_ok:.3f} own-sim={own_sim:.3f} "
      f"real PER={np.mean(pers):.4f}", flush=True)

bundle = ModelBundle(stack=fl.stack, flow=fl.flow, duration_model=du.model,
                     attention=at.block,
                     accent_index={a: i for i, a in enumerate(sorted(corpus.accents))},
                     speaker_index={s: i for i, s in enumerate(sorted(corpus.speakers))})

t0 = time.time()
report = evaluate_systems(corpus, bundle, clf, list(rc.eval.modes), rc.eval.alpha)
print(f"evaluate: {time.time()-t0:.0f}s", flush=True)
print(render_report_text(report))
print(f"TOTAL {time.time()-t_all:.0f}s")
