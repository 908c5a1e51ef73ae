use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

/// Plain row-major matrix for the reference computations below.
#[derive(Clone, Debug)]
struct Mat {
    r: usize,
    c: usize,
    d: Vec<f64>,
}

impl Mat {
    fn of(t: &Tensor) -> Mat {
        let (r, c) = match t.shape() {
            [c] => (1, *c),
            [r, c] => (*r, *c),
            s => panic!("unexpected shape {s:?}"),
        };
        Mat { r, c, d: t.data().to_vec() }
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.c + j]
    }

    fn mm(&self, o: &Mat) -> Mat {
        assert_eq!(self.c, o.r);
        let mut d = vec![0.0; self.r * o.c];
        for i in 0..self.r {
            for j in 0..o.c {
                d[i * o.c + j] = (0..self.c).map(|k| self.at(i, k) * o.at(k, j)).sum();
            }
        }
        Mat { r: self.r, c: o.c, d }
    }

    fn t(&self) -> Mat {
        let mut d = vec![0.0; self.d.len()];
        for i in 0..self.r {
            for j in 0..self.c {
                d[j * self.r + i] = self.at(i, j);
            }
        }
        Mat { r: self.c, c: self.r, d }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat { d: self.d.iter().map(|&x| f(x)).collect(), ..self.clone() }
    }

    fn plus(&self, o: &Mat) -> Mat {
        Mat { d: self.d.iter().zip(&o.d).map(|(a, b)| a + b).collect(), ..self.clone() }
    }

    /// Adds (or multiplies by) a row vector on every row.
    fn rows(&self, v: &Mat, mul: bool) -> Mat {
        let mut out = self.clone();
        for i in 0..self.r {
            for j in 0..self.c {
                let x = &mut out.d[i * self.c + j];
                *x = if mul { *x * v.d[j] } else { *x + v.d[j] };
            }
        }
        out
    }

    fn hcat(parts: &[Mat]) -> Mat {
        let r = parts[0].r;
        let c = parts.iter().map(|p| p.c).sum();
        let mut d = Vec::with_capacity(r * c);
        for i in 0..r {
            for p in parts {
                d.extend_from_slice(&p.d[i * p.c..(i + 1) * p.c]);
            }
        }
        Mat { r, c, d }
    }
}

fn p(model: &DefmModel, name: &str) -> Mat {
    Mat::of(model.param(name).unwrap_or_else(|| panic!("missing {name}")))
}

fn dense(model: &DefmModel, name: &str, x: &Mat) -> Mat {
    x.mm(&p(model, &format!("{name}.weight"))).rows(&p(model, &format!("{name}.bias")), false)
}

fn norm(model: &DefmModel, name: &str, x: &Mat) -> Mat {
    let mut out = x.clone();
    for i in 0..x.r {
        let row = &x.d[i * x.c..(i + 1) * x.c];
        let mean = row.iter().sum::<f64>() / x.c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.c as f64;
        for j in 0..x.c {
            out.d[i * x.c + j] = (row[j] - mean) / (var + LN_EPS).sqrt();
        }
    }
    out.rows(&p(model, &format!("{name}.gain")), true)
        .rows(&p(model, &format!("{name}.bias")), false)
}

fn softmax(x: &Mat) -> Mat {
    let mut out = x.clone();
    for row in out.d.chunks_mut(x.c) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v = (*v - mx).exp());
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

fn act(model: &DefmModel, x: &Mat) -> Mat {
    match model.config().activation {
        Activation::Tanh => x.map(f64::tanh),
        Activation::Relu => x.map(|v| v.max(0.0)),
    }
}

fn input(z: &SeriesMatrix) -> Mat {
    Mat { r: z.n(), c: z.m(), d: z.data().to_vec() }.t()
}

/// Time-major temporal features, straight from the layer definitions.
fn oracle_temporal(model: &DefmModel, z: &SeriesMatrix) -> Mat {
    let cfg = model.config();
    let dh = cfg.attn_dim / cfg.heads;
    let mut h = dense(model, "temporal.input", &input(z)).plus(&p(model, "temporal.position"));
    for l in 0..cfg.attn_layers {
        let heads: Vec<Mat> = (0..cfg.heads)
            .map(|k| {
                let pre = format!("temporal.layer{l}.head{k}");
                let q = h.mm(&p(model, &format!("{pre}.query")));
                let key = h.mm(&p(model, &format!("{pre}.key")));
                let v = h.mm(&p(model, &format!("{pre}.value")));
                let a = softmax(&q.mm(&key.t()).map(|s| s / (dh as f64).sqrt()));
                a.mm(&v)
            })
            .collect();
        let attended = dense(model, &format!("temporal.layer{l}.out"), &Mat::hcat(&heads));
        let h1 = norm(model, &format!("temporal.layer{l}.norm1"), &h.plus(&attended));
        let f = dense(model, &format!("temporal.layer{l}.ff1"), &h1).map(|v| v.max(0.0));
        let f = dense(model, &format!("temporal.layer{l}.ff2"), &f);
        h = norm(model, &format!("temporal.layer{l}.norm2"), &h1.plus(&f));
    }
    dense(model, "temporal.output", &h)
}

fn oracle_spatial(model: &DefmModel, x: &Mat) -> Mat {
    let mut h = x.clone();
    for k in 0..model.config().spatial_hidden.len() {
        h = act(model, &dense(model, &format!("spatial.{k}"), &h));
    }
    h
}

fn oracle_merge(model: &DefmModel, t: Option<&Mat>, s: &Mat) -> Mat {
    let mut h = match t {
        Some(t) => Mat::hcat(&[t.clone(), s.clone()]),
        None => s.clone(),
    };
    let layers = model.config().merge_hidden.len() + 1;
    for k in 0..layers {
        h = dense(model, &format!("merge.{k}"), &h);
        if k + 1 < layers {
            h = act(model, &h);
        }
    }
    h.t()
}

fn small(n: usize, m: usize, s: usize) -> ModelConfig {
    ModelConfig {
        attn_layers: 2,
        attn_dim: 8,
        heads: 2,
        ff_width: 12,
        spatial_hidden: vec![10, 6],
        merge_hidden: vec![7],
        ..ModelConfig::new(n, m, s)
    }
}

fn random_series(n: usize, m: usize, seed: u64) -> SeriesMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * m).map(|_| rng.random_range(-2.0..2.0)).collect();
    SeriesMatrix::new(n, m, data, 1.0).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
}

fn zero_param(model: &mut DefmModel, name: &str) {
    let len = model.param(name).unwrap().len();
    model.set_param(name, vec![0.0; len]).unwrap();
}

fn attention_weights(model: &DefmModel, z: &SeriesMatrix) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let vars = model.forward_on_tape(&mut tape, z).unwrap();
    vars.attention.iter().flatten().map(|&a| tape.value(a).clone()).collect()
}

#[test]
fn temporal_matches_reference() {
    for (seed, act) in [(1, Activation::Tanh), (2, Activation::Relu)] {
        let mut cfg = small(5, 7, 3);
        cfg.seed = seed;
        cfg.activation = act;
        let model = DefmModel::new(cfg).unwrap();
        let z = random_series(5, 7, seed + 10);
        let got = temporal_forward(&z, &model).unwrap();
        let want = oracle_temporal(&model, &z).t();
        assert_eq!(got.shape(), [6, 7]);
        assert!(close(got.data(), &want.d, 1e-12));
    }
}

#[test]
fn single_position_attention_is_trivial() {
    let cfg = ModelConfig { attn_layers: 1, ..small(4, 1, 1) };
    let model = DefmModel::new(cfg).unwrap();
    let z = random_series(4, 1, 3);
    for a in attention_weights(&model, &z) {
        assert_eq!(a.data(), [1.0]);
    }
    // with one position, each head returns its value projection unchanged
    let h = dense(&model, "temporal.input", &input(&z)).plus(&p(&model, "temporal.position"));
    let values: Vec<Mat> = (0..2).map(|k| h.mm(&p(&model, &format!("temporal.layer0.head{k}.value")))).collect();
    let attended = dense(&model, "temporal.layer0.out", &Mat::hcat(&values));
    let h1 = norm(&model, "temporal.layer0.norm1", &h.plus(&attended));
    let f = dense(&model, "temporal.layer0.ff2", &dense(&model, "temporal.layer0.ff1", &h1).map(|v| v.max(0.0)));
    let want = dense(&model, "temporal.output", &norm(&model, "temporal.layer0.norm2", &h1.plus(&f)));
    assert!(close(temporal_forward(&z, &model).unwrap().data(), &want.d, 1e-12));
}

#[test]
fn zero_query_key_gives_uniform_attention() {
    let mut model = DefmModel::new(small(3, 6, 2)).unwrap();
    let names: Vec<String> = model
        .param_names()
        .iter()
        .filter(|n| n.ends_with(".query") || n.ends_with(".key"))
        .cloned()
        .collect();
    for n in &names {
        zero_param(&mut model, n);
    }
    let z = random_series(3, 6, 4);
    for a in attention_weights(&model, &z) {
        assert!(a.data().iter().all(|&w| (w - 1.0 / 6.0).abs() < 1e-15));
    }
    // each position then attends to the mean value over positions
    let h = dense(&model, "temporal.input", &input(&z)).plus(&p(&model, "temporal.position"));
    let v = h.mm(&p(&model, "temporal.layer0.head0.value"));
    let uniform = Mat { r: 6, c: 6, d: vec![1.0 / 6.0; 36] };
    let attended = uniform.mm(&v);
    for i in 0..6 {
        for j in 0..v.c {
            let mean = (0..6).map(|r| v.at(r, j)).sum::<f64>() / 6.0;
            assert!((attended.at(i, j) - mean).abs() < 1e-14);
        }
    }
    assert!(close(temporal_forward(&z, &model).unwrap().data(), &oracle_temporal(&model, &z).t().d, 1e-12));
}

#[test]
fn default_shapes_at_lorenz_scale() {
    let model = DefmModel::new(ModelConfig::new(90, 45, 19)).unwrap();
    let z = random_series(90, 45, 5);
    let mut tape = Tape::new();
    let vars = model.forward_on_tape(&mut tape, &z).unwrap();
    assert_eq!(vars.attention.len(), 2);
    for layer in &vars.attention {
        assert_eq!(layer.len(), 4);
        for &a in layer {
            assert_eq!(tape.value(a).shape(), [45, 45]);
        }
    }
    assert_eq!(tape.value(vars.temporal.unwrap()).shape(), [45, 64]);
    assert_eq!(tape.value(vars.spatial).shape(), [45, 64]);
    assert_eq!(tape.value(vars.output).shape(), [19, 45]);
    assert_eq!(temporal_forward(&z, &model).unwrap().shape(), [64, 45]);
}

#[test]
fn spatial_cases() {
    let mut model = DefmModel::new(ModelConfig { spatial_hidden: vec![5], ..small(5, 4, 2) }).unwrap();
    zero_param(&mut model, "spatial.0.weight");
    zero_param(&mut model, "spatial.0.bias");
    assert_eq!(spatial_forward(&[1.0, -2.0, 3.0, 0.5, 4.0], &model).unwrap(), vec![0.0; 5]);

    let eye: Vec<f64> = (0..25).map(|k| if k % 6 == 0 { 1.0 } else { 0.0 }).collect();
    model.set_param("spatial.0.weight", eye).unwrap();
    let x = [0.3f64, -1.2, 2.0, 0.0, -0.7];
    let want: Vec<f64> = x.iter().map(|v| v.tanh()).collect();
    assert_eq!(spatial_forward(&x, &model).unwrap(), want);
    assert!(spatial_forward(&x[..4], &model).is_err());

    let model = DefmModel::new(ModelConfig { seed: 9, ..small(5, 4, 2) }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let want = oracle_spatial(&model, &Mat { r: 1, c: 5, d: x.clone() });
    assert_eq!(want.c, 6);
    assert!(close(&spatial_forward(&x, &model).unwrap(), &want.d, 1e-13));
}

#[test]
fn merge_cases() {
    let mut model = DefmModel::new(small(4, 5, 3)).unwrap();
    let feats = Tensor::new(vec![6, 5], (0..30).map(|k| (k as f64 * 0.37).sin()).collect()).unwrap();
    let other = Tensor::new(vec![6, 5], (0..30).map(|k| (k as f64 * 0.11).cos()).collect()).unwrap();
    let want = oracle_merge(&model, Some(&Mat::of(&feats).t()), &Mat::of(&other).t());
    let got = merge_forward(Some(&feats), &other, &model).unwrap();
    assert_eq!(got.shape(), [3, 5]);
    assert!(close(got.data(), &want.d, 1e-13));

    zero_param(&mut model, "merge.1.weight");
    model.set_param("merge.1.bias", vec![0.5, -1.0, 2.5]).unwrap();
    let got = merge_forward(Some(&feats), &other, &model).unwrap();
    for i in 0..5 {
        assert_eq!([got.at(0, i), got.at(1, i), got.at(2, i)], [0.5, -1.0, 2.5]);
    }
    assert!(merge_forward(None, &other, &model).is_err());
    let short = Tensor::new(vec![6, 4], vec![0.0; 24]).unwrap();
    assert!(merge_forward(Some(&short), &other, &model).is_err());

    let one = DefmModel::new(small(4, 5, 1)).unwrap();
    assert_eq!(merge_forward(Some(&feats), &other, &one).unwrap().shape(), [1, 5]);
}

#[test]
fn forward_is_the_composition_of_stages() {
    let model = DefmModel::new(ModelConfig { seed: 3, ..small(4, 6, 3) }).unwrap();
    let z = random_series(4, 6, 8);
    let t = temporal_forward(&z, &model).unwrap();
    let cols: Vec<f64> = (0..6).flat_map(|i| spatial_forward(&z.column(i), &model).unwrap()).collect();
    let s = Tensor::new(vec![6, 6], transpose_rows(&cols, 6, 6)).unwrap();
    let manual = merge_forward(Some(&t), &s, &model).unwrap();
    let whole = defm_forward(&z, &model).unwrap();
    assert!(close(whole.data(), manual.data(), 1e-13));
    let want = oracle_merge(&model, Some(&oracle_temporal(&model, &z)), &oracle_spatial(&model, &input(&z)));
    assert!(close(whole.data(), &want.d, 1e-12));
}

fn transpose_rows(d: &[f64], r: usize, c: usize) -> Vec<f64> {
    Mat { r, c, d: d.to_vec() }.t().d
}

#[test]
fn ablation_drops_the_temporal_branch() {
    let full = DefmModel::new(small(4, 6, 3)).unwrap();
    let cut = DefmModel::new(ModelConfig { temporal: false, ..small(4, 6, 3) }).unwrap();
    assert!(cut.param_count() < full.param_count());
    assert!(cut.param_names().iter().all(|n| !n.starts_with("temporal.")));
    let z = random_series(4, 6, 2);
    assert!(temporal_forward(&z, &cut).is_err());
    let want = oracle_merge(&cut, None, &oracle_spatial(&cut, &input(&z)));
    assert!(close(defm_forward(&z, &cut).unwrap().data(), &want.d, 1e-12));
}

#[test]
fn permuting_inputs_only_acts_through_weights() {
    let model = DefmModel::new(ModelConfig { seed: 4, ..small(4, 5, 2) }).unwrap();
    let z = random_series(4, 5, 1);
    let mut swapped = z.clone();
    swapped.row_mut(1).copy_from_slice(z.row(3));
    swapped.row_mut(3).copy_from_slice(z.row(1));
    let mut moved = model.clone();
    for name in ["temporal.input.weight", "spatial.0.weight"] {
        let w = Mat::of(model.param(name).unwrap());
        let mut d = w.d.clone();
        for j in 0..w.c {
            d[w.c + j] = w.at(3, j);
            d[3 * w.c + j] = w.at(1, j);
        }
        moved.set_param(name, d).unwrap();
    }
    let a = defm_forward(&z, &model).unwrap();
    let b = defm_forward(&swapped, &moved).unwrap();
    assert!(close(a.data(), b.data(), 1e-13));
    assert!(!close(a.data(), defm_forward(&swapped, &model).unwrap().data(), 1e-6));
}

#[test]
fn attention_rows_sum_to_one() {
    for seed in 0..5 {
        let model = DefmModel::new(ModelConfig { seed, ..small(3, 9, 4) }).unwrap();
        let z = random_series(3, 9, 100 + seed).zscore().0;
        for a in attention_weights(&model, &z) {
            for row in a.data().chunks(9) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn output_shape_does_not_depend_on_n() {
    for n in [1, 2, 7, 20] {
        let model = DefmModel::new(small(n, 6, 4)).unwrap();
        assert_eq!(defm_forward(&random_series(n, 6, n as u64), &model).unwrap().shape(), [4, 6]);
    }
    let model = DefmModel::new(small(3, 6, 4)).unwrap();
    assert!(defm_forward(&random_series(3, 5, 0), &model).is_err());
}

#[test]
fn construction_is_seeded() {
    let a = DefmModel::new(small(4, 6, 3)).unwrap();
    let b = DefmModel::new(small(4, 6, 3)).unwrap();
    let c = DefmModel::new(ModelConfig { seed: 1, ..small(4, 6, 3) }).unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());
    assert!(a.params().iter().all(Tensor::is_finite));
}

#[test]
fn config_validation() {
    assert!(DefmModel::new(ModelConfig { attn_dim: 10, heads: 4, ..small(3, 5, 2) }).is_err());
    assert!(DefmModel::new(ModelConfig { spatial_hidden: vec![], ..small(3, 5, 2) }).is_err());
    assert!(DefmModel::new(ModelConfig { merge_hidden: vec![0], ..small(3, 5, 2) }).is_err());
    assert!(DefmModel::new(ModelConfig { s: 0, ..small(3, 5, 2) }).is_err());
    // head divisibility is irrelevant without the temporal branch
    assert!(DefmModel::new(ModelConfig { attn_dim: 10, heads: 4, temporal: false, ..small(3, 5, 2) }).is_ok());
}

#[test]
fn checkpoint_round_trip_is_lossless() {
    let mut model = DefmModel::new(small(4, 6, 3)).unwrap();
    model.target = 2;
    model.normalizer = Normalizer {
        means: vec![0.1, 1.0 / 3.0, -2.0, 5.5],
        stds: vec![1.0, 0.7, 2.0 / 3.0, 1e-3],
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    model.save(&path).unwrap();
    let back = DefmModel::load(&path).unwrap();
    assert_eq!(back.params(), model.params());
    assert_eq!(back.param_names(), model.param_names());
    assert_eq!(back.normalizer, model.normalizer);
    assert_eq!((back.target, back.config()), (2, model.config()));
    let z = random_series(4, 6, 0);
    assert_eq!(defm_forward(&z, &back).unwrap(), defm_forward(&z, &model).unwrap());

    let text = model.to_checkpoint_string().unwrap();
    assert!(DefmModel::from_checkpoint_str(&text.replace("defm-checkpoint", "other")).is_err());
    assert!(DefmModel::from_checkpoint_str("{").is_err());
}

#[test]
fn full_model_gradient_check() {
    let cfg = ModelConfig {
        n: 6,
        m: 8,
        s: 3,
        attn_dim: 8,
        heads: 2,
        ff_width: 8,
        spatial_hidden: vec![8, 5],
        merge_hidden: vec![6],
        seed: 21,
        ..ModelConfig::new(6, 8, 3)
    };
    let model = DefmModel::new(cfg).unwrap();
    let z = random_series(6, 8, 22);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let weights: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = |m: &DefmModel| -> f64 {
        let out = defm_forward(&z, m).unwrap();
        out.data().iter().zip(&weights).map(|(a, w)| a * w).sum::<f64>()
    };
    let mut tape = Tape::new();
    let vars = model.forward_on_tape(&mut tape, &z).unwrap();
    let w = tape.constant(Tensor::new(vec![3, 8], weights.clone()).unwrap());
    let prod = tape.mul(vars.output, w).unwrap();
    let total = tape.sum(prod).unwrap();
    tape.backward(total).unwrap();

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, &v) in vars.params.iter().enumerate() {
        let analytic = tape.grad(v).unwrap().to_vec();
        for e in 0..analytic.len() {
            let mut plus = model.clone();
            plus.params_mut()[k].data_mut()[e] += h;
            let mut minus = model.clone();
            minus.params_mut()[k].data_mut()[e] -= h;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let err = (analytic[e] - numeric).abs() / analytic[e].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}
