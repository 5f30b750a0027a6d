"""Acceptance gate: ten numbered criteria, one test each.

Every test prints a single [criterion NN] PASS/FAIL line with the measured
values before asserting, so a failing run still reports what was observed.
"""

import json
import math
import time

import numpy as np
import pytest
import torch

from conftest import tiny_config
from patchlm import tokenizer as tok
from patchlm.cli import main as cli_main
from patchlm.data import (
    BBox,
    InstructExample,
    decode_bbox,
    encode_bbox,
    read_dataset,
    synth_records,
    write_dataset,
)
from patchlm.evaluation import iou, score_localization
from patchlm.fixture import CORE_BENCHMARKS, load_fixture_table, regression_checks
from patchlm.images import GranularityError, RawImage
from patchlm.modeling import (
    SYSTEM_PROMPT,
    BackboneConfig,
    ModelConfig,
    PatchFeatures,
    PromptEncoding,
    build_vlm,
    format_prompt,
    fuse_features,
    render_prompt_text,
)
from patchlm.stats import ScoreTable, aggregate, t_test_differences, zscores
from patchlm.training import (
    Hyperparameters,
    Stage,
    StagePlan,
    make_stage_plan,
    planned_cost_report,
    train,
)

torch.set_num_threads(1)


def report(criterion: int, ok: bool, detail: str) -> None:
    print(f"[criterion {criterion:02d}] {'PASS' if ok else 'FAIL'} — {detail}")


def rand_image(seed=0, h=48, w=48):
    rng = np.random.default_rng(seed)
    return RawImage(rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8))


# ---------------------------------------------------------------------------
# 1. Freezing contract


def test_criterion_01_freezing_contract():
    t0 = time.time()
    records, images = synth_records(seed=0, n=2, canvas=64)
    imgs = {k: RawImage(v) for k, v in images.items()}
    examples = [r.to_instruct() for r in records]
    align = [e for e in examples if e.task_kind == "caption"]
    instruct = [e for e in examples if e.task_kind in ("vqa", "multiple-choice")][:3]
    data = {"align": align, "instruct": instruct, "all": examples}
    h = Hyperparameters(batch_size=2, peak_lr=1e-3)

    failures = []
    for procedure in (
        "multi-stage",
        "single-stage",
        "single-stage-full-finetune",
        "multi-stage-full-finetune",
    ):
        plan = make_stage_plan(procedure, h)
        model = build_vlm(tiny_config(), seed=0)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        # epoch_count 6 gives every stage >= 3 optimizer steps
        model, ledger = train(
            plan, data, model, h, seed=0, images=imgs, epoch_count=6.0
        )
        assert all(s.steps >= 3 for s in ledger.stages), procedure

        trainable_union = set()
        for stage in plan.stages:
            trainable_union |= set(stage.trainable)
        prefix = {"backbone": "backbones.", "projector": "projector.", "lm": "lm."}
        depth = model.cfg.backbones[0].depth
        dead = f".blocks.{depth - 1}."  # final ViT block never enters the graph
        changed = unchanged_violations = 0
        total_trainable = 0
        for name, after in model.state_dict().items():
            comp = next(c for c, p in prefix.items() if name.startswith(p))
            if comp == "backbone" and dead in name:
                comp = "frozen"  # trainer always excludes the dead block
            if comp in trainable_union:
                total_trainable += after.numel()
                changed += int((before[name] != after).sum())
            elif not torch.equal(before[name], after):
                unchanged_violations += 1
        frac = changed / total_trainable
        if unchanged_violations or frac < 0.99:
            failures.append(f"{procedure}: frozen-violations={unchanged_violations} changed={frac:.4f}")
    elapsed = time.time() - t0
    ok = not failures and elapsed < 60
    report(1, ok, f"4 plans, frozen params bitwise stable, runtime {elapsed:.1f}s"
           + (f"; failures: {failures}" if failures else ""))
    assert ok


# ---------------------------------------------------------------------------
# 2. Fusion equivalence


def test_criterion_02_fusion_equivalence():
    cfg = tiny_config(
        backbones=[
            BackboneConfig(name="a", patch_size=16, dim=16, depth=2, heads=2),
            BackboneConfig(name="b", patch_size=16, dim=24, depth=2, heads=2),
        ]
    )
    model = build_vlm(cfg, seed=0)
    enc = format_prompt("base", "What is this?", "A blob.")
    images = model.images_to_tensor([rand_image()])

    fused_loss, _ = model.forward_tokens([enc.tokens], [enc.loss_mask], images=images)
    feats = [bb(images) for bb in model.backbones]
    manual = PatchFeatures(
        values=torch.cat([f.values for f in feats], dim=-1), source="manual"
    )
    manual_loss, _ = model.forward_tokens([enc.tokens], [enc.loss_mask], features=manual)
    equal = torch.equal(fused_loss, manual_loss)

    with pytest.raises(GranularityError):
        fuse_features(
            PatchFeatures(values=torch.randn(1, 256, 4), source="x"),
            PatchFeatures(values=torch.randn(1, 196, 4), source="y"),
        )
    report(2, equal, f"fused loss == manual concat loss ({fused_loss.detach().item():.6f}), "
           "256-vs-196 patch fusion rejected")
    assert equal


# ---------------------------------------------------------------------------
# 3. Gradient check


def test_criterion_03_gradient_finite_differences():
    cfg = ModelConfig(
        backbones=[BackboneConfig(patch_size=16, dim=8, depth=2, heads=2)],
        projector_hidden=8,
        lm_dim=16,
        lm_depth=2,
        lm_heads=2,
        max_context=64,
        image_scheme="naive-resize",
        image_resolution=32,  # 2x2 = 4 patches
    )
    model = build_vlm(cfg, seed=0).double()
    # 8-token instance: BOS + 4 prompt bytes + 2 response bytes + EOS
    tokens = [tok.BOS_ID] + tok.encode("In:Q") + tok.encode("ok") + [tok.EOS_ID]
    mask = [False] * 5 + [True] * 3
    assert len(tokens) == 8
    enc = PromptEncoding(text="In:Qok", tokens=tokens, loss_mask=mask)
    images = model.images_to_tensor([rand_image()])

    def loss_fn():
        loss, _ = model.forward_tokens([enc.tokens], [enc.loss_mask], images=images)
        return loss

    loss = loss_fn()
    model.zero_grad()
    loss.backward()

    rng = np.random.default_rng(0)
    eps = 1e-6
    worst = 0.0
    for module in (model.projector, model.lm):
        params = [p for p in module.parameters() if p.grad is not None]
        for _ in range(10):
            p = params[int(rng.integers(len(params)))]
            idx = tuple(int(rng.integers(s)) for s in p.shape)
            analytic = float(p.grad[idx])
            with torch.no_grad():
                orig = float(p[idx])
                p[idx] = orig + eps
                up = float(loss_fn())
                p[idx] = orig - eps
                down = float(loss_fn())
                p[idx] = orig
            numeric = (up - down) / (2 * eps)
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, rel)
    ok = worst < 1e-4
    report(3, ok, f"20 sampled projector/LM coordinates, worst relative error {worst:.2e}")
    assert ok


# ---------------------------------------------------------------------------
# 4. Overfit smoke


def test_criterion_04_overfit_smoke():
    t0 = time.time()
    records, images = synth_records(seed=21, n=8)
    sel = [
        r
        for r in records
        if r.task_kind in ("vqa", "localization")
        or (r.options is not None and len(r.options) == 2)
    ]
    examples = [r.to_instruct() for r in sel][:32]
    assert len(examples) == 32
    imgs = {k: RawImage(v) for k, v in images.items()}

    cfg = ModelConfig(
        backbones=[BackboneConfig(patch_size=16, dim=96, depth=2, heads=4)],
        projector_hidden=128,
        lm_dim=128,
        lm_depth=2,
        lm_heads=4,
        max_context=512,
        image_scheme="naive-resize",
        image_resolution=128,
    )
    model = build_vlm(cfg, seed=3)
    h = Hyperparameters(batch_size=8, peak_lr=3e-3)
    plan = StagePlan(
        "overfit", [Stage("finetune", {"backbone", "projector", "lm"}, 8, 3e-3, "all")]
    )
    # 32 examples / batch 8 = 4 steps per epoch; 75 epochs = 300 steps
    model, ledger = train(
        plan, {"all": examples}, model, h, seed=3, images=imgs, epoch_count=75.0
    )
    rec = ledger.stages[0]
    assert rec.steps == 300

    encs = [format_prompt(cfg.prompt_style, e.prompt, e.response) for e in examples]
    with torch.no_grad():
        final_loss = float(
            model.example_loss([imgs[e.image_ref] for e in examples], encs)
        )
    verbatim = sum(
        model.generate_greedy(imgs[e.image_ref], e.prompt, max_new=40).text
        == e.response
        for e in examples
    )
    epoch1 = sum(rec.losses[0:4]) / 4
    epoch2 = sum(rec.losses[4:8]) / 4
    elapsed = time.time() - t0
    ok = (
        final_loss < 0.1
        and verbatim >= math.ceil(0.9 * 32)
        and epoch2 < epoch1
        and elapsed < 300
    )
    report(
        4,
        ok,
        f"loss {final_loss:.4f} (<0.1), verbatim {verbatim}/32 (>=29), "
        f"epoch losses {epoch1:.3f} -> {epoch2:.3f}, runtime {elapsed:.0f}s",
    )
    assert ok


# ---------------------------------------------------------------------------
# 5. Metric oracles


def test_criterion_05_iou_oracle():
    exact = iou(BBox(0.0, 0.0, 0.5, 0.5), BBox(0.25, 0.25, 0.75, 0.75))
    exact_ok = abs(exact - 1.0 / 7.0) < 1e-9

    res = 1000
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(500):
        # grid-aligned coordinates (multiples of 1/1000, like the 3-decimal codec)
        ax = np.sort(rng.integers(0, res + 1, size=2))
        ay = np.sort(rng.integers(0, res + 1, size=2))
        bx = np.sort(rng.integers(0, res + 1, size=2))
        by = np.sort(rng.integers(0, res + 1, size=2))
        a = BBox(ax[0] / res, ay[0] / res, ax[1] / res, ay[1] / res)
        b = BBox(bx[0] / res, by[0] / res, bx[1] / res, by[1] / res)
        ma = np.zeros((res, res), dtype=bool)
        mb = np.zeros((res, res), dtype=bool)
        ma[ay[0] : ay[1], ax[0] : ax[1]] = True
        mb[by[0] : by[1], bx[0] : bx[1]] = True
        inter = int((ma & mb).sum())
        union = int((ma | mb).sum())
        raster = inter / union if union else 0.0
        worst = max(worst, abs(raster - iou(a, b)))
    raster_ok = worst <= 1e-3

    # thresholded accuracy: IoU 1/7 passes acc@0.1, fails acc@0.25 and acc@0.5
    gt = BBox(0.0, 0.0, 0.5, 0.5)
    pred = encode_bbox(BBox(0.25, 0.25, 0.75, 0.75))
    thr_ok = (
        score_localization(pred, gt, 0.5) == (0, False)
        and score_localization(pred, gt, 0.25) == (0, False)
        and score_localization(pred, gt, 0.1) == (1, False)
    )
    ok = exact_ok and raster_ok and thr_ok
    report(
        5,
        ok,
        f"IoU=1/7 exact (err {abs(exact - 1/7):.1e}), raster worst err {worst:.1e} over "
        f"500 pairs, acc@0.25/acc@0.5 thresholds behave",
    )
    assert ok


# ---------------------------------------------------------------------------
# 6. Statistics oracle


def test_criterion_06_statistics_oracle():
    table = load_fixture_table("visual-representation")
    z = zscores(table)
    col = table.values[:, table.benchmarks.index("VQAv2")]
    expected = (col - col.mean()) / col.std()  # independent recomputation, ddof=0
    siglip = z.value("SigLIP ViT-SO 224px", "VQAv2")
    z_ok = abs(siglip - 1.099) < 1e-3 and np.allclose(
        z.values[:, table.benchmarks.index("VQAv2")], expected
    )

    res = t_test_differences([0.5, 0.3, 0.7])
    # closed-form t CDF oracle for df=2: P(T > t) = (1 - t/sqrt(2+t^2))/2
    t_stat = res.t_statistic
    p_oracle = 0.5 * (1.0 - t_stat / math.sqrt(2.0 + t_stat**2))
    p_ok = abs(res.p_value - 0.0247) < 1e-3 and abs(res.p_value - p_oracle) < 1e-12
    ok = z_ok and p_ok
    report(
        6,
        ok,
        f"z(SigLIP VQAv2)={siglip:+.4f} (~+1.099), p={res.p_value:.4f} "
        f"(oracle {p_oracle:.4f})",
    )
    assert ok


# ---------------------------------------------------------------------------
# 7. Fixture regression


def test_criterion_07_fixture_regression():
    t0 = time.time()
    checks = regression_checks()
    elapsed = time.time() - t0
    by_name = {c["name"]: c for c in checks}
    assert set(by_name) == {
        "single-stage-7b-vs-reproduction",
        "fused-vs-siglip-refcoco-gap",
        "fused-vs-siglip-pope-gap",
        "prism-dinosiglip-13b-top-aggregate",
    }
    ok = all(c["ok"] for c in checks) and elapsed < 10
    detail = "; ".join(f"{c['name']}: {c['detail']}" for c in checks)
    report(7, ok, f"{detail}; runtime {elapsed:.2f}s")
    assert ok


# ---------------------------------------------------------------------------
# 8. Cost ledger


def test_criterion_08_cost_ledger():
    h = Hyperparameters(batch_size=128)  # align batches at 2x = 256
    multi = planned_cost_report(
        make_stage_plan("multi-stage", h), {"align": 558, "instruct": 665}
    )
    share = multi["stages"][0]["step_share"]
    single = planned_cost_report(
        make_stage_plan("single-stage", h), {"align": 558, "instruct": 665}
    )
    align_share_single = sum(
        s["step_share"] for s in single["stages"] if s["name"] == "align"
    )
    ok = abs(share - 0.296) <= 0.005 and align_share_single == 0.0
    report(
        8,
        ok,
        f"multi-stage align share {share * 100:.2f}% (29.6 ± 0.5), "
        f"single-stage align share {align_share_single:.0%}",
    )
    assert ok


# ---------------------------------------------------------------------------
# 9. Determinism


TINY_CLI = [
    "--set", "data.n=2",
    "--set", "data.canvas=64",
    "--set", "image.resolution=28",
    "--set", "image.scheme=naive-resize",
    "--set", "model.lm_dim=32",
    "--set", "model.lm_depth=2",
    "--set", "model.lm_heads=2",
    "--set", "model.projector_hidden=32",
    "--set", "train.batch_size=8",
    "--set", "train.peak_lr=1e-3",
]


def test_criterion_09_determinism(tmp_path):
    data_dir = tmp_path / "data"
    assert cli_main(["synth", *TINY_CLI, "--seed", "0", "--out", str(data_dir)]) == 0
    train_args = TINY_CLI + ["--set", f"data.path={data_dir}"]

    ckpts, transcripts = [], []
    for run in ("r1", "r2"):
        run_dir = tmp_path / run
        assert (
            cli_main(["train", *train_args, "--seed", "0", "--out", str(run_dir)]) == 0
        )
        ckpts.append((run_dir / "checkpoint.bin").read_bytes())
        out = tmp_path / f"{run}.transcript.jsonl"
        assert (
            cli_main(
                [
                    "evaluate",
                    "--model", str(run_dir / "checkpoint.bin"),
                    "--task", str(data_dir / "tasks" / "color-vqa.task.jsonl"),
                    "--out", str(out),
                    "--max-new", "8",
                ]
            )
            == 0
        )
        transcripts.append(out.read_bytes())
    ok = ckpts[0] == ckpts[1] and transcripts[0] == transcripts[1]
    report(
        9,
        ok,
        f"checkpoints bit-identical: {ckpts[0] == ckpts[1]} "
        f"({len(ckpts[0])} bytes); transcripts identical: {transcripts[0] == transcripts[1]}",
    )
    assert ok


# ---------------------------------------------------------------------------
# 10. Format round-trips


def test_criterion_10_format_round_trips(tmp_path):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        x = np.sort(rng.random(2))
        y = np.sort(rng.random(2))
        box = BBox(x[0], y[0], x[1], y[1])
        back = decode_bbox(encode_bbox(box))
        worst = max(
            worst,
            abs(back.x_min - box.x_min),
            abs(back.y_min - box.y_min),
            abs(back.x_max - box.x_max),
            abs(back.y_max - box.y_max),
        )
    bbox_ok = worst <= 5e-4

    examples = [
        InstructExample(id="a", task_kind="vqa", prompt="Q?", response="R.", image_ref="i.png"),
        InstructExample(id="b", task_kind="language-only", prompt="Hi", response="Yo"),
    ]
    write_dataset(tmp_path / "d.jsonl", examples)
    dataset_ok = read_dataset(tmp_path / "d.jsonl") == examples

    scores = ScoreTable(
        ["m1", "m2"], ["B1", "B2"], np.array([[70.25, float("nan")], [68.5, 55.0]])
    )
    scores.write(tmp_path / "s.csv")
    back = ScoreTable.read(tmp_path / "s.csv")
    mask = ~np.isnan(scores.values)
    scores_ok = (
        back.models == scores.models
        and back.benchmarks == scores.benchmarks
        and np.array_equal(back.values[mask], scores.values[mask])
        and np.array_equal(np.isnan(back.values), np.isnan(scores.values))
    )

    base_ok = render_prompt_text("base", "What is this?", "A cat.") == (
        "In: What is this? Out: A cat."
    )
    instruct_ok = render_prompt_text("instruct", "What is this?", "A cat.") == (
        f"{SYSTEM_PROMPT} USER: What is this? ASSISTANT: A cat."
    )
    ok = bbox_ok and dataset_ok and scores_ok and base_ok and instruct_ok
    report(
        10,
        ok,
        f"bbox worst coord err {worst:.2e} (<=5e-4), dataset={dataset_ok}, "
        f"scores={scores_ok}, prompts base={base_ok} instruct={instruct_ok}",
    )
    assert ok
