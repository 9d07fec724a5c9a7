mod common;

use common::{check_layer, max_abs_diff, probe, rand_tensor, rng};
use msinet_core::layers::{Ctx, Group, Mode, ParamSet};
use msinet_core::numerics::{Tensor, Var};
use msinet_core::space::{
    discretize, ArchDescriptor, Branch, Cell, ChannelGate, CrossAttention, Fusion, InteractionOp, Network, Slot,
    SlotLogits, SpaceConfig, MSINET_OPS, NUM_SLOTS,
};
use proptest::prelude::*;
use rand::Rng;

/// Searchable slot with non-zero attention scales so every operation differs.
fn live_slot(ps: &mut ParamSet<f64>, channels: usize, seed: u64) -> Slot {
    let mut r = rng(seed);
    let slot = Slot::new(ps, "slot", channels, None, &mut r);
    let attn = slot.attn.clone().unwrap();
    *ps.get_mut(attn.gamma1) = Tensor::full(&[1], 0.7);
    *ps.get_mut(attn.gamma2) = Tensor::full(&[1], -0.4);
    slot
}

fn pair(ctx: &mut Ctx<'_, f64>, seed: u64, shape: &[usize]) -> (Var, Var) {
    let mut r = rng(seed);
    let a = rand_tensor(&mut r, shape);
    let b = rand_tensor(&mut r, shape);
    (ctx.tape.constant(&a), ctx.tape.constant(&b))
}

const SHAPE: [usize; 4] = [2, 4, 3, 2];

#[test]
fn exchange_is_an_involution() {
    let mut ps = ParamSet::new();
    let slot = live_slot(&mut ps, 4, 1);
    let mut ctx = Ctx::frozen(&ps, Mode::Train);
    let (a, b) = pair(&mut ctx, 2, &SHAPE);
    let once = slot.apply(&mut ctx, InteractionOp::Exchange, a, b).unwrap();
    assert_eq!(once, (b, a));
    let twice = slot.apply(&mut ctx, InteractionOp::Exchange, once.0, once.1).unwrap();
    assert_eq!(twice, (a, b));
    assert_eq!(slot.apply(&mut ctx, InteractionOp::None, a, b).unwrap(), (a, b));
}

#[test]
fn channel_gate_properties() {
    let mut ps = ParamSet::new();
    let slot = live_slot(&mut ps, 4, 3);
    let gate: ChannelGate = slot.gate.clone().unwrap();
    let mut ctx = Ctx::frozen(&ps, Mode::Train);
    let (a, b) = pair(&mut ctx, 4, &SHAPE);
    let g = gate.gate(&mut ctx, a).unwrap();
    assert!(ctx.tape.value(g).iter().all(|&v| v > 0.0 && v < 1.0));
    let (ya, yb) = slot.apply(&mut ctx, InteractionOp::ChannelGate, a, b).unwrap();
    for (y, x) in [(ya, a), (yb, b)] {
        for (o, i) in ctx.tape.value(y).iter().zip(ctx.tape.value(x)) {
            assert!(o.abs() <= i.abs());
        }
    }

    let mut zeroed = ps.clone();
    for id in [gate.fc1.weight, gate.fc1.bias.unwrap(), gate.fc2.weight, gate.fc2.bias.unwrap()] {
        zeroed.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut ctx = Ctx::frozen(&zeroed, Mode::Train);
    let (a, b) = pair(&mut ctx, 4, &SHAPE);
    let (ya, _) = slot.apply(&mut ctx, InteractionOp::ChannelGate, a, b).unwrap();
    let half: Vec<f64> = ctx.tape.value(a).iter().map(|v| v / 2.0).collect();
    assert_eq!(ctx.tape.value(ya), half.as_slice());
}

#[test]
fn cross_attention_properties() {
    let mut ps = ParamSet::<f64>::new();
    let attn = CrossAttention::new(&mut ps, "a");
    let mut ctx = Ctx::frozen(&ps, Mode::Train);
    let (a, b) = pair(&mut ctx, 5, &SHAPE);
    let (ya, yb) = attn.forward(&mut ctx, a, b).unwrap();
    assert_eq!(ctx.tape.value(ya), ctx.tape.value(a));
    assert_eq!(ctx.tape.value(yb), ctx.tape.value(b));

    let qa = ctx.tape.reshape(a, &[2, 4, 6]).unwrap();
    let qb = ctx.tape.reshape(b, &[2, 4, 6]).unwrap();
    let att = CrossAttention::attention(&mut ctx, qa, qb).unwrap();
    for row in ctx.tape.value(att).chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn cross_attention_swaps_keys() {
    // Branch 1 output uses softmax(x1 · x2ᵀ) applied to x1, computed here by hand.
    let mut ps = ParamSet::<f64>::new();
    let attn = CrossAttention::new(&mut ps, "a");
    *ps.get_mut(attn.gamma1) = Tensor::full(&[1], 0.5);
    let mut r = rng(6);
    let (c, n) = (3, 4);
    let x1 = rand_tensor(&mut r, &[1, c, 2, 2]);
    let x2 = rand_tensor(&mut r, &[1, c, 2, 2]);
    let mut ctx = Ctx::frozen(&ps, Mode::Train);
    let (a, b) = (ctx.tape.constant(&x1), ctx.tape.constant(&x2));
    let (y1, _) = attn.forward(&mut ctx, a, b).unwrap();
    let (p, q) = (x1.data(), x2.data());
    for i in 0..c {
        let logits: Vec<f64> = (0..c).map(|j| (0..n).map(|t| p[i * n + t] * q[j * n + t]).sum()).collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        for t in 0..n {
            let mixed: f64 = (0..c).map(|j| (logits[j] - mx).exp() / z * p[j * n + t]).sum();
            let expect = p[i * n + t] + 0.5 * mixed;
            assert!((ctx.tape.value(y1)[i * n + t] - expect).abs() < 1e-12);
        }
    }
}

fn outputs(ctx: &mut Ctx<'_, f64>, slot: &Slot, a: Var, b: Var) -> Vec<(Vec<f64>, Vec<f64>)> {
    InteractionOp::ALL
        .iter()
        .map(|&op| {
            let (x, y) = slot.apply(ctx, op, a, b).unwrap();
            (ctx.tape.value(x).to_vec(), ctx.tape.value(y).to_vec())
        })
        .collect()
}

fn softmax(l: &[f64]) -> Vec<f64> {
    let mx = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = l.iter().map(|v| (v - mx).exp()).sum();
    l.iter().map(|v| (v - mx).exp() / z).collect()
}

#[test]
fn mixing_matches_independent_weighted_sum() {
    let mut ps = ParamSet::new();
    let slot = live_slot(&mut ps, 4, 7);
    for seed in 0..20 {
        let mut r = rng(300 + seed);
        let logits: Vec<f64> = (0..4).map(|_| r.random_range(-2.0..2.0)).collect();
        let mut ctx = Ctx::frozen(&ps, Mode::Train);
        let (a, b) = pair(&mut ctx, seed, &SHAPE);
        let each = outputs(&mut ctx, &slot, a, b);
        let lv = ctx.tape.constant(&Tensor::new(&[4], logits.clone()).unwrap());
        let (ma, mb) = slot.mix(&mut ctx, lv, a, b).unwrap();
        let w = softmax(&logits);
        // Accumulate in reverse order as a second, independent evaluation path.
        for (side, got) in [(0, ma), (1, mb)] {
            let mut expect = vec![0.0; each[0].0.len()];
            for o in (0..4).rev() {
                let src = if side == 0 { &each[o].0 } else { &each[o].1 };
                expect.iter_mut().zip(src).for_each(|(e, v)| *e += w[o] * v);
            }
            assert!(max_abs_diff(ctx.tape.value(got), &expect) < 1e-10);
        }
    }
}

#[test]
fn mixing_saturated_and_uniform() {
    let mut ps = ParamSet::new();
    let slot = live_slot(&mut ps, 4, 8);
    let mut ctx = Ctx::frozen(&ps, Mode::Train);
    let (a, b) = pair(&mut ctx, 9, &SHAPE);
    let each = outputs(&mut ctx, &slot, a, b);
    for o in 0..4 {
        let mut l = vec![-40.0; 4];
        l[o] = 40.0;
        let lv = ctx.tape.constant(&Tensor::new(&[4], l).unwrap());
        let (ma, mb) = slot.mix(&mut ctx, lv, a, b).unwrap();
        assert!(max_abs_diff(ctx.tape.value(ma), &each[o].0) <= f32::EPSILON as f64);
        assert!(max_abs_diff(ctx.tape.value(mb), &each[o].1) <= f32::EPSILON as f64);
    }
    let lv = ctx.tape.constant(&Tensor::full(&[4], 0.3));
    let (ma, _) = slot.mix(&mut ctx, lv, a, b).unwrap();
    let mean: Vec<f64> = (0..each[0].0.len()).map(|i| each.iter().map(|e| e.0[i]).sum::<f64>() / 4.0).collect();
    assert!(max_abs_diff(ctx.tape.value(ma), &mean) < 1e-12);
}

#[test]
fn mixing_is_permutation_consistent() {
    // Pairing logits with operations in a shuffled order and summing gives
    // the same mixture.
    let mut ps = ParamSet::new();
    let slot = live_slot(&mut ps, 4, 10);
    let mut ctx = Ctx::frozen(&ps, Mode::Train);
    let (a, b) = pair(&mut ctx, 11, &SHAPE);
    let each = outputs(&mut ctx, &slot, a, b);
    let logits = [0.3, -1.2, 0.8, 0.1];
    let lv = ctx.tape.constant(&Tensor::new(&[4], logits.to_vec()).unwrap());
    let (ma, _) = slot.mix(&mut ctx, lv, a, b).unwrap();
    let perm = [2, 0, 3, 1];
    let permuted_logits: Vec<f64> = perm.iter().map(|&p| logits[p]).collect();
    let w = softmax(&permuted_logits);
    let mut expect = vec![0.0; each[0].0.len()];
    for (k, &p) in perm.iter().enumerate() {
        expect.iter_mut().zip(&each[p].0).for_each(|(e, v)| *e += w[k] * v);
    }
    assert!(max_abs_diff(ctx.tape.value(ma), &expect) < 1e-12);
}

#[test]
fn interaction_gradients() {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut ps = ParamSet::new();
        let slot = live_slot(&mut ps, 4, 400 + seed);
        let mut r = rng(500 + seed);
        let inputs = [rand_tensor(&mut r, &SHAPE), rand_tensor(&mut r, &SHAPE), rand_tensor(&mut r, &[4])];
        let gate = slot.gate.clone().unwrap();
        let attn = slot.attn.clone().unwrap();
        let ids = [gate.fc1.weight, gate.fc2.weight, gate.fc1.bias.unwrap(), attn.gamma1, attn.gamma2];
        worst = worst.max(check_layer(&ps, &ids, &inputs, Mode::Train, |ctx, v| {
            let (a, b) = slot.mix(ctx, v[2], v[0], v[1])?;
            let s = ctx.tape.add(a, b)?;
            probe(&mut ctx.tape, s)
        }));
    }
    assert!(worst < 1e-4, "mixed interaction max relative error {worst:e}");
}

/// Sets every conv weight of a branch to `value`.
fn fill_branch(ps: &mut ParamSet<f64>, br: &Branch, value: f64) {
    for b in std::iter::once(&br.pointwise).chain(&br.depthwise) {
        ps.get_mut(b.conv.weight).data_mut().iter_mut().for_each(|v| *v = value);
    }
}

#[test]
fn branch_receptive_field_grows_with_depth() {
    for (depth, support) in [(1, 3), (3, 7)] {
        let mut ps = ParamSet::new();
        let br = Branch::new(&mut ps, "b", 2, depth, &mut rng(12));
        fill_branch(&mut ps, &br, 1.0);
        let mut img = Tensor::<f64>::zeros(&[1, 2, 11, 11]);
        img.data_mut()[5 * 11 + 5] = 1.0;
        let mut ctx = Ctx::frozen(&ps, Mode::Eval);
        let x = ctx.tape.constant(&img);
        let y = br.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.tape.shape(y), &[1, 2, 11, 11]);
        let plane = &ctx.tape.value(y)[..121];
        let cols: Vec<usize> = (0..121).filter(|&i| plane[i] != 0.0).map(|i| i % 11).collect();
        let rows: Vec<usize> = (0..121).filter(|&i| plane[i] != 0.0).map(|i| i / 11).collect();
        assert_eq!(cols.iter().max().unwrap() - cols.iter().min().unwrap() + 1, support);
        assert_eq!(rows.iter().max().unwrap() - rows.iter().min().unwrap() + 1, support);
    }
}

#[test]
fn branch_zero_weights_and_gradients() {
    let mut ps = ParamSet::new();
    let br = Branch::new(&mut ps, "b", 2, 2, &mut rng(13));
    fill_branch(&mut ps, &br, 0.0);
    let mut ctx = Ctx::frozen(&ps, Mode::Eval);
    let x = ctx.tape.constant(&rand_tensor(&mut rng(14), &[2, 2, 4, 4]));
    let y = br.forward(&mut ctx, x).unwrap();
    assert!(ctx.tape.value(y).iter().all(|&v| v == 0.0));

    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut ps = ParamSet::new();
        let br = Branch::new(&mut ps, "b", 2, 3, &mut rng(600 + seed));
        let ids: Vec<_> = std::iter::once(&br.pointwise).chain(&br.depthwise).map(|b| b.conv.weight).collect();
        let x = rand_tensor(&mut rng(700 + seed), &[3, 2, 4, 3]);
        worst = worst.max(check_layer(&ps, &ids, &[x], Mode::Train, |ctx, v| {
            let y = br.forward(ctx, v[0])?;
            probe(&mut ctx.tape, y)
        }));
    }
    assert!(worst < 1e-4, "branch stack max relative error {worst:e}");
}

fn symmetric_cell(fusion: Fusion) -> (ParamSet<f64>, Cell) {
    let mut ps = ParamSet::new();
    let choices = [Some(InteractionOp::None); 2];
    let cell = Cell::new(&mut ps, "cell", 8, 8, 4, 1, fusion, choices, &mut rng(15));
    let names: Vec<String> = ps.iter().map(|(_, p)| p.name.clone()).filter(|n| n.contains(".b0.")).collect();
    for n in names {
        let src = ps.get(ps.find(&n).unwrap()).clone();
        let dst = ps.find(&n.replace(".b0.", ".b1.")).unwrap();
        *ps.get_mut(dst) = src;
    }
    (ps, cell)
}

#[test]
fn cell_symmetry_cases() {
    let x = rand_tensor(&mut rng(16), &[2, 8, 4, 4]);
    let (ps, cell) = symmetric_cell(Fusion::Sum);
    let mut ctx = Ctx::frozen(&ps, Mode::Train);
    let xv = ctx.tape.constant(&x);
    let out = cell.forward(&mut ctx, xv, SlotLogits::Fixed).unwrap();
    let r = cell.reduce.forward(&mut ctx, xv).unwrap();
    let s1 = cell.stages[0][0].forward(&mut ctx, r).unwrap();
    let single = cell.stages[1][0].forward(&mut ctx, s1).unwrap();
    let doubled: Vec<f64> = ctx.tape.value(single).iter().map(|v| 2.0 * v).collect();
    assert_eq!(ctx.tape.value(out.fused), doubled.as_slice());

    let (ps, cell) = symmetric_cell(Fusion::Minus);
    let mut ctx = Ctx::frozen(&ps, Mode::Train);
    let xv = ctx.tape.constant(&x);
    let out = cell.forward(&mut ctx, xv, SlotLogits::Fixed).unwrap();
    assert!(ctx.tape.value(out.fused).iter().all(|&v| v == 0.0));
}

#[test]
fn cell_matches_manual_composition() {
    for fusion in [Fusion::Sum, Fusion::Minus, Fusion::Mul] {
        let mut ps = ParamSet::new();
        let cell = Cell::new(&mut ps, "cell", 8, 8, 4, 3, fusion, [None, None], &mut rng(17));
        let alpha = ps.add("alpha", Group::Arch, rand_tensor(&mut rng(18), &[2, 4]));
        let x = rand_tensor(&mut rng(19), &[2, 8, 4, 4]);
        let mut ctx = Ctx::frozen(&ps, Mode::Train);
        let xv = ctx.tape.constant(&x);
        let av = ctx.param(alpha);
        let out = cell.forward(&mut ctx, xv, SlotLogits::Rows(av, 0)).unwrap();

        let r = cell.reduce.forward(&mut ctx, xv).unwrap();
        let mut p = (r, r);
        for s in 0..2 {
            let a = cell.stages[s][0].forward(&mut ctx, p.0).unwrap();
            let b = cell.stages[s][1].forward(&mut ctx, p.1).unwrap();
            let row = ctx.tape.constant(&Tensor::new(&[4], ps.get(alpha).data()[s * 4..s * 4 + 4].to_vec()).unwrap());
            p = cell.slots[s].mix(&mut ctx, row, a, b).unwrap();
        }
        let fused = fusion.apply(&mut ctx, p.0, p.1).unwrap();
        let e = cell.expand.forward(&mut ctx, fused).unwrap();
        let e = ctx.tape.add(e, xv).unwrap();
        let e = ctx.tape.relu(e);
        assert_eq!(ctx.tape.value(out.out), ctx.tape.value(e));
        assert!(cell.residual);
    }
    let mut ps = ParamSet::<f64>::new();
    let cell = Cell::new(&mut ps, "c", 8, 16, 4, 3, Fusion::Sum, [Some(InteractionOp::None); 2], &mut rng(1));
    assert!(!cell.residual);
}

#[test]
fn fusion_parses() {
    assert_eq!("minus".parse::<Fusion>().unwrap(), Fusion::Minus);
    assert!("max".parse::<Fusion>().is_err());
}

fn tiny_config() -> SpaceConfig {
    SpaceConfig { height: 32, width: 16, stem_width: 8, widths: [8, 16, 16], embedding: 12, ..SpaceConfig::desk() }
}

#[test]
fn downsample_cases() {
    let cfg = tiny_config();
    let mut ps = ParamSet::<f64>::new();
    let net = Network::fixed(&cfg, &[InteractionOp::None; NUM_SLOTS], &mut ps, &mut rng(20)).unwrap();
    let mut ctx = Ctx::frozen(&ps, Mode::Eval);
    let x = rand_tensor(&mut rng(21), &[2, 8, 8, 4]);
    let xv = ctx.tape.constant(&x);
    let y = net.downsample(&mut ctx, 0, xv).unwrap();
    assert_eq!(ctx.tape.shape(y), &[2, 16, 4, 2]);
    let odd = ctx.tape.constant(&Tensor::zeros(&[1, 8, 5, 4]));
    assert!(net.downsample(&mut ctx, 0, odd).is_err());

    // Naive oracle: 1×1 conv, eval-mode normalization with unit stats, ReLU, 2×2 mean.
    let w = ps.get(net.downs[0].conv.weight).data();
    let s = 1.0 / (1.0f64 + 1e-5).sqrt();
    let xd = x.data();
    let mut expect = Vec::new();
    for b in 0..2 {
        for o in 0..16 {
            for oy in 0..4 {
                for ox in 0..2 {
                    let mut acc = 0.0;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let (iy, ix) = (oy * 2 + dy, ox * 2 + dx);
                        let z: f64 = (0..8).map(|c| w[o * 8 + c] * xd[((b * 8 + c) * 8 + iy) * 4 + ix]).sum();
                        acc += (z * s).max(0.0);
                    }
                    expect.push(acc / 4.0);
                }
            }
        }
    }
    assert!(max_abs_diff(ctx.tape.value(y), &expect) < 1e-12);

    let mut ident = ps.clone();
    let wid = net.downs[0].conv.weight;
    ident.get_mut(wid).data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = if i % 9 == 0 { 1.0 } else { 0.0 });
    let mut ctx = Ctx::frozen(&ident, Mode::Eval);
    let c = ctx.tape.constant(&Tensor::full(&[1, 8, 8, 4], 0.5));
    let y = net.downsample(&mut ctx, 0, c).unwrap();
    let first = ctx.tape.value(y)[0];
    assert!((first - 0.5 * s).abs() < 1e-12);
    assert!(ctx.tape.value(y)[..8 * 8].iter().all(|&v| v == first));
}

#[test]
fn network_shapes_and_validation() {
    let cfg = tiny_config();
    let mut ps = ParamSet::<f64>::new();
    let net = Network::supernet(&cfg, &mut ps, &mut rng(22)).unwrap();
    let mut ctx = Ctx::frozen(&ps, Mode::Train);
    let x = ctx.tape.constant(&rand_tensor(&mut rng(23), &[3, 3, 32, 16]));
    let out = net.forward(&mut ctx, x).unwrap();
    assert_eq!(ctx.tape.shape(out.embedding), &[3, 12]);
    assert_eq!(ctx.tape.shape(out.feature_map), &[3, 16, 2, 1]);
    let bad = ctx.tape.constant(&Tensor::zeros(&[1, 3, 30, 16]));
    assert!(net.forward(&mut ctx, bad).is_err());
    let odd = SpaceConfig { height: 40, ..tiny_config() };
    assert!(Network::supernet(&odd, &mut ParamSet::<f64>::new(), &mut rng(0)).is_err());

    let mut ps = ParamSet::<f64>::new();
    Network::fixed(&cfg, &[InteractionOp::None; NUM_SLOTS], &mut ps, &mut rng(24)).unwrap();
    assert!(ps.iter().all(|(_, p)| !p.name.contains(".gate.") && !p.name.contains(".attn.")));
    assert!(ps.ids(Group::Arch).is_empty());

    let mut ps = ParamSet::<f32>::new();
    let desk = SpaceConfig::desk();
    let net = Network::fixed(&desk, &ArchDescriptor::msinet(&desk).ops, &mut ps, &mut rng(25)).unwrap();
    assert!(net.projection.is_none());
    let mut ctx = Ctx::frozen(&ps, Mode::Eval);
    let x = ctx.tape.constant(&Tensor::zeros(&[2, 3, 64, 32]));
    let out = net.forward(&mut ctx, x).unwrap();
    assert_eq!(ctx.tape.shape(out.embedding), &[2, 64]);
}

#[test]
fn saturated_supernet_equals_fixed_network() {
    let cfg = tiny_config();
    let mut r = rng(26);
    let mut sup_ps = ParamSet::<f32>::new();
    let sup = Network::supernet(&cfg, &mut sup_ps, &mut r).unwrap();
    for (id, p) in sup_ps.iter().map(|(id, p)| (id, p.name.clone())).collect::<Vec<_>>() {
        if p.ends_with(".gamma1") || p.ends_with(".gamma2") {
            *sup_ps.get_mut(id) = Tensor::full(&[1], 0.3);
        }
    }
    let images = rand_tensor(&mut r, &[4, 3, 32, 16]).cast::<f32>();
    for seed in 0..3 {
        let desc = ArchDescriptor::random(&cfg, &mut rng(27 + seed));
        let logits = Tensor::from_fn(&[NUM_SLOTS, 4], |i| if i % 4 == desc.ops[i / 4].index() { 40.0 } else { -40.0 });
        *sup_ps.get_mut(sup.alpha.unwrap()) = logits;
        let mut fixed_ps = ParamSet::<f32>::new();
        let fixed = Network::fixed(&cfg, &desc.ops, &mut fixed_ps, &mut rng(99)).unwrap();
        fixed_ps.copy_matching(&sup_ps).unwrap();
        assert_eq!(fixed.ops().unwrap(), desc.ops);

        let run = |net: &Network, ps: &ParamSet<f32>| {
            let mut ctx = Ctx::frozen(ps, Mode::Train);
            let x = ctx.tape.constant(&images);
            let out = net.forward(&mut ctx, x).unwrap();
            ctx.tape.value(out.embedding).to_vec()
        };
        let (a, b) = (run(&sup, &sup_ps), run(&fixed, &fixed_ps));
        let scale = a.iter().fold(1.0f32, |m, v| m.max(v.abs()));
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(diff <= 4.0 * f32::EPSILON * scale, "descriptor {} diff {diff}", desc.ops_string());
    }
}

#[test]
fn gradient_reaches_every_alpha_row() {
    let cfg = tiny_config();
    let mut ps = ParamSet::<f64>::new();
    let net = Network::supernet(&cfg, &mut ps, &mut rng(28)).unwrap();
    let images = rand_tensor(&mut rng(29), &[4, 3, 32, 16]);
    let mut ctx = Ctx::new(&ps, Mode::Train, &[Group::Arch]);
    let x = ctx.tape.constant(&images);
    let out = net.forward(&mut ctx, x).unwrap();
    let loss = probe(&mut ctx.tape, out.embedding).unwrap();
    let mut target = ps.clone();
    assert_eq!(ctx.backward_into(loss, &mut target).unwrap(), 1);
    let g = target.get(net.alpha.unwrap()).grad().unwrap();
    for (slot, row) in g.chunks(4).enumerate() {
        assert!(row.iter().all(|&v| v != 0.0), "slot {slot} has a zero alpha gradient: {row:?}");
    }
    assert!(ps.ids(Group::Weight).iter().all(|&id| target.get(id).grad().is_none()));
}

#[test]
fn discretize_examples() {
    let mut alpha = vec![0.0f64; NUM_SLOTS * 4];
    alpha[..4].copy_from_slice(&[0.1, 0.9, 0.2, 0.3]);
    let ops = discretize(&alpha).unwrap();
    assert_eq!(ops[0], InteractionOp::Exchange);
    assert!(ops[1..].iter().all(|&o| o == InteractionOp::None));

    let table = ArchDescriptor::msinet(&SpaceConfig::desk());
    let mut alpha = vec![-1.0f32; NUM_SLOTS * 4];
    for (s, op) in table.ops.iter().enumerate() {
        alpha[s * 4 + op.index()] = 2.5;
    }
    let ops = discretize(&alpha).unwrap();
    assert_eq!(ops, table.ops);
    assert_eq!(table.ops_string(), MSINET_OPS);
    assert_eq!(MSINET_OPS, "GGEGAGGNGAEA");

    assert!(discretize(&[0.0f64; 5]).is_err());
    let mut nan = vec![0.0f64; NUM_SLOTS * 4];
    nan[3] = f64::NAN;
    assert!(discretize(&nan).is_err());
}

#[test]
fn full_width_parameter_count_is_stable() {
    // Regression constant for the preset architecture at full widths.
    const FULL_WEIGHT_COUNT: usize = 1_091_910;
    let cfg = SpaceConfig::full();
    let count = |seed| {
        let mut ps = ParamSet::<f32>::new();
        Network::fixed(&cfg, &ArchDescriptor::msinet(&cfg).ops, &mut ps, &mut rng(seed)).unwrap();
        ps.count(Group::Weight)
    };
    let n = count(1);
    assert_eq!(n, count(2));
    assert_eq!(n, FULL_WEIGHT_COUNT);
}

proptest! {
    #[test]
    fn discretize_ignores_row_shifts(vals in proptest::collection::vec(-5.0f64..5.0, NUM_SLOTS * 4),
                                     shifts in proptest::collection::vec(-100.0f64..100.0, NUM_SLOTS)) {
        let shifted: Vec<f64> = vals.iter().enumerate().map(|(i, v)| v + shifts[i / 4]).collect();
        // Shifts can merge nearly-equal entries after rounding; compare only rows whose gap survives.
        let a = discretize(&vals).unwrap();
        let b = discretize(&shifted).unwrap();
        for s in 0..NUM_SLOTS {
            let row = &vals[s * 4..s * 4 + 4];
            let mut sorted = row.to_vec();
            sorted.sort_by(|x, y| y.partial_cmp(x).unwrap());
            if sorted[0] - sorted[1] > 1e-9 {
                prop_assert_eq!(a[s], b[s]);
            }
        }
    }

    #[test]
    fn descriptor_text_round_trips(codes in proptest::collection::vec(0usize..4, NUM_SLOTS),
                                   rho in 1usize..6, fusion in 0usize..3, emb in 1usize..1024) {
        let ops: [InteractionOp; NUM_SLOTS] = std::array::from_fn(|i| InteractionOp::ALL[codes[i]]);
        let cfg = SpaceConfig {
            rho,
            embedding: emb,
            fusion: [Fusion::Sum, Fusion::Minus, Fusion::Mul][fusion],
            ..SpaceConfig::desk()
        };
        let d = ArchDescriptor::new(ops, &cfg);
        prop_assert_eq!(ArchDescriptor::parse(&d.to_text()).unwrap(), d);
    }
}

