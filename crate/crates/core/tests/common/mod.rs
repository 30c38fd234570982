//! Loop-level reference implementation of the whole model, written against
//! parameter names only. Shares no code with the graph engine.

#![allow(dead_code, clippy::needless_range_loop)]

use mmixer::{ContentMode, EpisodeBatch, FusionMode, Model, ModelConfig};

const EPS: f64 = 1e-5;

pub struct Naive<'a> {
    model: &'a Model<f64>,
    cfg: &'a ModelConfig,
}

/// Per-sample intermediates the oracle exposes.
pub struct NaiveTrace {
    pub content: Vec<Vec<f64>>,
    /// `hidden[i][t]`
    pub hidden: Vec<Vec<Vec<f64>>>,
    pub update_gates: Vec<Vec<Vec<f64>>>,
    pub scores: Vec<Vec<Vec<f64>>>,
    /// `alpha[t][k]`
    pub alpha: Vec<Vec<f64>>,
    pub fused: Vec<f64>,
    pub probs: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `W x` for row-major `W[rows × x.len()]`.
fn matvec(w: &[f64], x: &[f64]) -> Vec<f64> {
    w.chunks(x.len()).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + EPS).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) * inv * gain[i] + bias[i])
        .collect()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

impl<'a> Naive<'a> {
    pub fn new(model: &'a Model<f64>) -> Self {
        Self {
            model,
            cfg: model.config(),
        }
    }

    fn p(&self, name: &str) -> &[f64] {
        self.model
            .params()
            .by_name(name)
            .unwrap_or_else(|| panic!("no parameter {name}"))
            .data()
    }

    fn ln(&self, prefix: &str, x: &[f64]) -> Vec<f64> {
        layer_norm(x, self.p(&format!("{prefix}.gain")), self.p(&format!("{prefix}.bias")))
    }

    /// `F[c][t][s]` for one sample of one modality.
    fn encode(&self, i: usize, x: &[f64]) -> Vec<Vec<Vec<f64>>> {
        let c = self.cfg;
        let hw = c.height * c.width;
        let w = self.p(&format!("encoder.{i}.weight"));
        let b = self.p(&format!("encoder.{i}.bias"));
        (0..c.d_h)
            .map(|o| {
                (0..c.frames)
                    .map(|t| {
                        (0..hw)
                            .map(|s| {
                                let mut acc = b[o];
                                for k in 0..c.d_f {
                                    acc += w[o * c.d_f + k] * x[(k * c.frames + t) * hw + s];
                                }
                                acc.tanh()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    /// Stride-2, kernel-4 temporal conv then tanh on `x[c][t]`.
    fn conv_tanh(&self, w: &[f64], b: &[f64], x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let (cin, t_in) = (x.len(), x[0].len());
        let t_out = (t_in - 4) / 2 + 1;
        (0..b.len())
            .map(|o| {
                (0..t_out)
                    .map(|t| {
                        let mut acc = b[o];
                        for c in 0..cin {
                            for k in 0..4 {
                                acc += w[(o * cin + c) * 4 + k] * x[c][2 * t + k];
                            }
                        }
                        acc.tanh()
                    })
                    .collect()
            })
            .collect()
    }

    /// Tokens `f̂[s][c]` of modality `i`.
    fn cfem_tokens(&self, i: usize, f: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
        let hw = self.cfg.height * self.cfg.width;
        let pre = format!("cfem.{i}");
        (0..hw)
            .map(|s| {
                let seq: Vec<Vec<f64>> = f.iter().map(|ch| ch.iter().map(|ts| ts[s]).collect()).collect();
                let y = self.conv_tanh(self.p(&format!("{pre}.conv1.weight")), self.p(&format!("{pre}.conv1.bias")), &seq);
                let y = self.conv_tanh(self.p(&format!("{pre}.conv2.weight")), self.p(&format!("{pre}.conv2.bias")), &y);
                y.iter().map(|ch| ch.iter().sum::<f64>() / ch.len() as f64).collect()
            })
            .collect()
    }

    fn cfem_decode(&self, i: usize, tokens: &[Vec<f64>]) -> Vec<f64> {
        let c = self.cfg;
        let (d, h) = (c.d_h, c.heads);
        let dk = d / h;
        let pre = format!("cfem.{i}");
        let pos = self.p(&format!("{pre}.pos"));
        let query = self.p(&format!("{pre}.query")).to_vec();
        let lin = |name: &str, x: &[f64]| {
            add(
                &matvec(self.p(&format!("{pre}.mha.w_{name}")), x),
                self.p(&format!("{pre}.mha.b_{name}")),
            )
        };
        let q = lin("q", &query);
        let keyed: Vec<Vec<f64>> = tokens
            .iter()
            .enumerate()
            .map(|(l, tok)| add(tok, &pos[l * d..(l + 1) * d]))
            .collect();
        let ks: Vec<Vec<f64>> = keyed.iter().map(|x| lin("k", x)).collect();
        let value_in = if c.pos_on_values { &keyed } else { tokens };
        let vs: Vec<Vec<f64>> = value_in.iter().map(|x| lin("v", x)).collect();
        let mut ctx = vec![0.0; d];
        for head in 0..h {
            let r = head * dk..(head + 1) * dk;
            let scores: Vec<f64> = ks
                .iter()
                .map(|k| q[r.clone()].iter().zip(&k[r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let w = softmax(&scores);
            for (l, v) in vs.iter().enumerate() {
                for j in r.clone() {
                    ctx[j] += w[l] * v[j];
                }
            }
        }
        let out = lin("o", &ctx);
        self.ln(&format!("{pre}.ln"), &add(&out, &query))
    }

    fn gate(&self, pre: &str, w: &str, ln: &str, x: &[f64]) -> Vec<f64> {
        self.ln(&format!("{pre}.{ln}"), &matvec(self.p(&format!("{pre}.{w}")), x))
    }

    /// Runs sample `b` of `batch`.
    pub fn forward(&self, batch: &EpisodeBatch<f64>, b: usize) -> NaiveTrace {
        let c = self.cfg;
        let n = c.n_modalities;
        let per = c.d_f * c.frames * c.height * c.width;
        let hw = (c.height * c.width) as f64;
        let feats: Vec<_> = (0..n)
            .map(|i| self.encode(i, &batch.modalities[i].data()[b * per..(b + 1) * per]))
            .collect();
        // f[i][t][c]
        let pooled_t: Vec<Vec<Vec<f64>>> = feats
            .iter()
            .map(|f| {
                (0..c.frames)
                    .map(|t| (0..c.d_h).map(|ch| f[ch][t].iter().sum::<f64>() / hw).collect())
                    .collect()
            })
            .collect();
        let pooled: Vec<Vec<f64>> = pooled_t
            .iter()
            .map(|seq| (0..c.d_h).map(|ch| seq.iter().map(|v| v[ch]).sum::<f64>() / c.frames as f64).collect())
            .collect();
        let content: Vec<Vec<f64>> = match c.content {
            ContentMode::SelfContent => pooled.clone(),
            ContentMode::CrossConcat => (0..n)
                .map(|i| (0..n).filter(|&j| j != i).flat_map(|j| pooled[j].clone()).collect())
                .collect(),
            ContentMode::Cfem => {
                let tokens: Vec<_> = (0..n).map(|i| self.cfem_tokens(i, &feats[i])).collect();
                (0..n)
                    .map(|i| {
                        let c_i: Vec<Vec<f64>> = (0..n).filter(|&j| j != i).flat_map(|j| tokens[j].clone()).collect();
                        self.cfem_decode(i, &c_i)
                    })
                    .collect()
            }
        };

        let mut hidden = vec![Vec::new(); n];
        let mut update_gates = vec![Vec::new(); n];
        let mut scores = vec![Vec::new(); n];
        for i in 0..n {
            let pre = format!("mcu.{i}");
            let g_bar: Vec<f64> = self.gate(&pre, "W_g", "ln_g", &content[i]).iter().map(|v| v.tanh()).collect();
            let mut h = vec![0.0; c.d_h];
            for t in 0..c.frames {
                let f_bar: Vec<f64> = self.gate(&pre, "W_f", "ln_f", &pooled_t[i][t]).iter().map(|v| v.tanh()).collect();
                let joint: Vec<f64> = f_bar.iter().chain(&g_bar).cloned().collect();
                let s: Vec<f64> = self.gate(&pre, "W_s", "ln_s", &joint).iter().map(|&v| sigmoid(v)).collect();
                let mixed: Vec<f64> = (0..c.d_h).map(|j| s[j] * f_bar[j] + (1.0 - s[j]) * g_bar[j]).collect();
                let gin = add(&mixed, &h);
                let r: Vec<f64> = self.gate(&pre, "W_hr", "ln_r", &gin).iter().map(|&v| sigmoid(v)).collect();
                let z: Vec<f64> = self.gate(&pre, "W_hz", "ln_z", &gin).iter().map(|&v| sigmoid(v)).collect();
                let cin: Vec<f64> = (0..c.d_h).map(|j| r[j] * h[j] + mixed[j]).collect();
                let cand: Vec<f64> = self.gate(&pre, "W_hh", "ln_h", &cin).iter().map(|v| v.tanh()).collect();
                h = (0..c.d_h).map(|j| z[j] * cand[j] + (1.0 - z[j]) * h[j]).collect();
                hidden[i].push(h.clone());
                update_gates[i].push(z);
                scores[i].push(s);
            }
        }

        let mut alpha = Vec::new();
        let fused: Vec<f64> = match c.fusion {
            FusionMode::Concat => (0..n).flat_map(|i| hidden[i][c.frames - 1].clone()).collect(),
            FusionMode::Bank => {
                let k = c.bank_size;
                let m0 = self.p("bank.M_init");
                let mut m: Vec<Vec<f64>> = (0..k).map(|s| m0[s * c.d_h..(s + 1) * c.d_h].to_vec()).collect();
                let w_u = self.p("bank.W_u");
                for t in 0..c.frames {
                    let h_cat: Vec<f64> = (0..n)
                        .flat_map(|i| matvec(self.p(&format!("bank.W_h.{i}")), &hidden[i][t]))
                        .collect();
                    let mut a_t = Vec::with_capacity(k);
                    for row in m.iter_mut() {
                        let a = sigmoid(row.iter().zip(&h_cat).map(|(x, y)| x * y).sum());
                        a_t.push(a);
                        let mixed: Vec<f64> = row.iter().zip(&h_cat).map(|(x, y)| a * x + (1.0 - a) * y).collect();
                        // M' = M̂ W_u (row vector times matrix).
                        *row = (0..c.d_h)
                            .map(|col| (0..c.d_h).map(|j| mixed[j] * w_u[j * c.d_h + col]).sum())
                            .collect();
                    }
                    alpha.push(a_t);
                }
                let w_r = self.p("bank.W_r");
                (0..c.d_h).map(|j| (0..k).map(|s| w_r[s] * m[s][j]).sum()).collect()
            }
        };
        let logits = add(&matvec(self.p("head.W_p"), &fused), self.p("head.b_p"));
        NaiveTrace {
            content,
            hidden,
            update_gates,
            scores,
            alpha,
            fused,
            probs: softmax(&logits),
        }
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Worst absolute disagreement between the graph model and the oracle over
/// every sample of `batch`: hidden states, fused vector and probabilities.
pub fn oracle_gap(model: &Model<f64>, batch: &EpisodeBatch<f64>) -> f64 {
    let mut g = mmixer::Graph::inference();
    let tr = model.forward(&mut g, batch).unwrap();
    let naive = Naive::new(model);
    let c = model.config();
    let mut worst = 0.0f64;
    for b in 0..batch.len() {
        let nv = naive.forward(batch, b);
        for i in 0..c.n_modalities {
            let got = g.value(tr.content[i]).data();
            let w = got.len() / batch.len();
            worst = worst.max(max_abs_diff(&got[b * w..(b + 1) * w], &nv.content[i]));
            for t in 0..c.frames {
                let got = g.value(tr.mcu[i].steps[t].hidden).data();
                worst = worst.max(max_abs_diff(&got[b * c.d_h..(b + 1) * c.d_h], &nv.hidden[i][t]));
            }
        }
        let fused = g.value(tr.fused).data();
        let w = fused.len() / batch.len();
        worst = worst.max(max_abs_diff(&fused[b * w..(b + 1) * w], &nv.fused));
        let probs = g.value(tr.probs).data();
        worst = worst.max(max_abs_diff(&probs[b * c.classes..(b + 1) * c.classes], &nv.probs));
    }
    worst
}
