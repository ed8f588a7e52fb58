//! Brute-force recomputation of a modulation run from files on disk.
//!
//! Reads a sequence manifest, exported trace directories and the JSON run
//! report, recomputes every reported quantity in f64 with straightforward
//! loops, and compares. Only std and serde_json are used here.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde_json::Value;

#[derive(Debug, Clone, Copy)]
pub struct Range {
    pub start: usize,
    pub end: usize,
}

impl Range {
    fn from_json(v: &Value) -> Range {
        Range {
            start: v["start"].as_u64().unwrap() as usize,
            end: v["end"].as_u64().unwrap() as usize,
        }
    }

    fn len(&self) -> usize {
        self.end - self.start
    }

    fn iter(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

#[derive(Debug, Clone)]
pub struct Element {
    pub image: Range,
    pub question: Range,
    pub answer: Range,
}

impl Element {
    fn text(&self) -> Vec<usize> {
        self.question.iter().chain(self.answer.iter()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub n_shots: usize,
    pub caption_mode: bool,
    pub elements: Vec<Element>,
}

pub fn read_layout(sequence_dir: &Path) -> Layout {
    let m: Value =
        serde_json::from_str(&fs::read_to_string(sequence_dir.join("manifest.json")).unwrap())
            .unwrap();
    let l = &m["layout"];
    let elements: Vec<Element> = l["elements"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| Element {
            image: Range::from_json(&e["image"]),
            question: Range::from_json(&e["question"]),
            answer: Range::from_json(&e["answer"]),
        })
        .collect();
    Layout {
        n_shots: l["n_shots"].as_u64().unwrap() as usize,
        caption_mode: l["caption_mode"].as_bool().unwrap(),
        elements,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    /// 1-based.
    pub layer: usize,
    pub head: Option<usize>,
    pub column: usize,
    pub row_from: usize,
    pub value: f64,
}

impl Entry {
    fn from_json(v: &Value) -> Entry {
        Entry {
            layer: v["layer"].as_u64().unwrap() as usize,
            head: v["head"].as_u64().map(|h| h as usize),
            column: v["column"].as_u64().unwrap() as usize,
            row_from: v["row_from"].as_u64().unwrap() as usize,
            value: v["value"].as_f64().unwrap(),
        }
    }

    fn key(&self) -> (usize, Option<usize>, usize, usize) {
        (self.layer, self.head, self.column, self.row_from)
    }
}

pub struct TraceLayer {
    pub logits: Vec<f32>,
    pub pre_bias: Option<Vec<f32>>,
    pub hidden: Option<Vec<f32>>,
}

pub struct Trace {
    pub heads: usize,
    pub seq_len: usize,
    pub dim: usize,
    /// Keyed by 1-based layer.
    pub layers: BTreeMap<usize, TraceLayer>,
    pub plan: Vec<Entry>,
}

fn read_blob(path: &Path) -> Vec<f32> {
    let bytes = fs::read(path).unwrap();
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn read_trace(dir: &Path) -> Trace {
    let m: Value =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    let blob = |v: &Value| v.as_str().map(|name| read_blob(&dir.join(name)));
    let layers = m["layers"]
        .as_array()
        .unwrap()
        .iter()
        .map(|l| {
            (
                l["layer"].as_u64().unwrap() as usize,
                TraceLayer {
                    logits: blob(&l["logits"]).unwrap(),
                    pre_bias: blob(&l["pre_bias"]),
                    hidden: blob(&l["hidden"]),
                },
            )
        })
        .collect();
    Trace {
        heads: m["dims"]["n_heads"].as_u64().unwrap() as usize,
        seq_len: m["seq_len"].as_u64().unwrap() as usize,
        dim: m["dims"]["model_dim"].as_u64().unwrap() as usize,
        layers,
        plan: m["plan"]
            .as_array()
            .unwrap()
            .iter()
            .map(Entry::from_json)
            .collect(),
    }
}

impl Trace {
    /// Logits before any bias, `[h][r][c]`.
    fn raw(&self, layer: usize, h: usize, r: usize, c: usize) -> f64 {
        let l = &self.layers[&layer];
        let data = l.pre_bias.as_ref().unwrap_or(&l.logits);
        f64::from(data[(h * self.seq_len + r) * self.seq_len + c])
    }

    fn hidden(&self, layer: usize, r: usize, k: usize) -> f64 {
        f64::from(self.layers[&layer].hidden.as_ref().unwrap()[r * self.dim + k])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rho {
    Raw,
    Softmax,
}

#[derive(Debug, Clone)]
pub struct Setup {
    /// 1-based layers.
    pub stage1: Vec<usize>,
    pub stage2: Vec<usize>,
    pub k1: f64,
    pub k2: f64,
    pub eps: f64,
    pub rho: Rho,
    pub query_factor_one: bool,
    /// Stage I scored inside the modulated pass.
    pub single_pass: bool,
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Probabilities floored at 1e-12 and renormalized, as required before log
/// ratios.
fn floored_softmax(x: &[f64]) -> Vec<f64> {
    let p: Vec<f64> = softmax(x).into_iter().map(|v| v.max(1e-12)).collect();
    let z: f64 = p.iter().sum();
    p.iter().map(|v| v / z).collect()
}

fn top(scores: &[f64], pct: f64) -> Vec<usize> {
    let k = ((pct * scores.len() as f64) / 100.0).ceil() as usize;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort();
    idx
}

fn gain(to: f64, from: f64) -> f64 {
    if to > from {
        (to - from) * (to / from).ln()
    } else {
        0.0
    }
}

#[derive(Debug, Clone)]
pub struct LayerGains {
    pub layer: usize,
    pub p_q0: Vec<f64>,
    pub p_a0: Vec<f64>,
    pub p_alast: Option<Vec<f64>>,
    pub c1: Vec<f64>,
    pub c2: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ElementScores {
    pub layers: Vec<LayerGains>,
    pub scores: Vec<f64>,
    pub key_set: Vec<usize>,
    pub max_score: f64,
}

pub struct Expected {
    pub elements: Vec<ElementScores>,
    pub heads: Vec<(usize, Vec<f64>, Vec<usize>)>,
    pub p: Vec<Vec<f64>>,
    pub similarities: Vec<f64>,
    pub w: Vec<f64>,
    pub plan: Vec<Entry>,
}

fn anchor(trace: &Trace, layer: usize, row: usize, image: Range) -> Vec<f64> {
    let avg: Vec<f64> = image
        .iter()
        .map(|j| {
            let mut s = 0.0;
            for h in 0..trace.heads {
                s += trace.raw(layer, h, row, j);
            }
            s / trace.heads as f64
        })
        .collect();
    floored_softmax(&avg)
}

fn layer_gains(trace: &Trace, layer: usize, layout: &Layout, i: usize) -> LayerGains {
    let e = &layout.elements[i];
    let query = i == layout.n_shots;
    let d = |row| anchor(trace, layer, row, e.image);
    let (p_q0, p_a0, p_alast) = if e.question.len() == 0 {
        (d(e.answer.start), d(e.answer.end - 1), None)
    } else if query || layout.caption_mode {
        (d(e.question.start), d(e.answer.start), None)
    } else {
        (
            d(e.question.start),
            d(e.answer.start),
            Some(d(e.answer.end - 1)),
        )
    };
    let c1 = (0..p_a0.len()).map(|j| gain(p_a0[j], p_q0[j])).collect();
    let c2 = match &p_alast {
        Some(pl) => (0..p_a0.len()).map(|j| gain(pl[j], p_a0[j])).collect(),
        None => vec![0.0; p_a0.len()],
    };
    LayerGains {
        layer,
        p_q0,
        p_a0,
        p_alast,
        c1,
        c2,
    }
}

fn element_scores(layers: Vec<LayerGains>, image: Range, k1: f64) -> ElementScores {
    let mut scores = vec![0.0; image.len()];
    for g in &layers {
        for (j, s) in scores.iter_mut().enumerate() {
            *s += g.c1[j] + g.c2[j];
        }
    }
    let local = top(&scores, k1);
    let max_score = local
        .iter()
        .map(|&j| scores[j])
        .fold(f64::NEG_INFINITY, f64::max);
    ElementScores {
        layers,
        key_set: local.iter().map(|j| j + image.start).collect(),
        scores,
        max_score,
    }
}

fn factor(i: usize, n: usize, query_one: bool) -> f64 {
    if i <= n {
        (n + 1 - i) as f64 / n as f64
    } else if query_one {
        1.0
    } else {
        1.0 / n as f64
    }
}

fn stage1_entries(
    layer: usize,
    elements: &[ElementScores],
    layout: &Layout,
    setup: &Setup,
) -> Vec<Entry> {
    let n = layout.n_shots;
    let mut out = Vec::new();
    for (i, e) in elements.iter().enumerate() {
        let pf = factor(i + 1, n, setup.query_factor_one);
        let start = layout.elements[i].image.start;
        for &j in &e.key_set {
            out.push(Entry {
                layer,
                head: None,
                column: j,
                row_from: j + 1,
                value: pf * e.scores[j - start] / (e.max_score + setup.eps),
            });
        }
    }
    out
}

fn flow(trace: &Trace, layer: usize, layout: &Layout, rho: Rho) -> Vec<f64> {
    let q = &layout.elements[layout.n_shots];
    let rows = q.text();
    let ctx_end = q.image.start;
    (0..trace.heads)
        .map(|h| {
            let mut total = 0.0;
            for &r in &rows {
                total += match rho {
                    Rho::Raw => (0..ctx_end).map(|c| trace.raw(layer, h, r, c)).sum::<f64>(),
                    Rho::Softmax => {
                        let row: Vec<f64> = (0..=r).map(|c| trace.raw(layer, h, r, c)).collect();
                        softmax(&row)[..ctx_end].iter().sum::<f64>()
                    }
                };
            }
            total / rows.len() as f64
        })
        .collect()
}

fn mean_hidden(trace: &Trace, layer: usize, rows: &[usize]) -> Vec<f64> {
    (0..trace.dim)
        .map(|k| rows.iter().map(|&r| trace.hidden(layer, r, k)).sum::<f64>() / rows.len() as f64)
        .collect()
}

/// `clean` supplies Stage I logits in two-pass mode; `modulated` everything
/// else.
pub fn recompute(
    layout: &Layout,
    setup: &Setup,
    clean: Option<&Trace>,
    modulated: &Trace,
) -> Expected {
    let n_el = layout.elements.len();
    let mut gains: Vec<Vec<LayerGains>> = vec![Vec::new(); n_el];
    let mut plan = Vec::new();
    let mut elements = Vec::new();
    for &l in &setup.stage1 {
        let source = if setup.single_pass {
            modulated
        } else {
            clean.unwrap()
        };
        for (i, g) in gains.iter_mut().enumerate() {
            g.push(layer_gains(source, l, layout, i));
        }
        if setup.single_pass {
            elements = (0..n_el)
                .map(|i| element_scores(gains[i].clone(), layout.elements[i].image, setup.k1))
                .collect();
            plan.extend(stage1_entries(l, &elements, layout, setup));
        }
    }
    if !setup.single_pass {
        elements = (0..n_el)
            .map(|i| element_scores(gains[i].clone(), layout.elements[i].image, setup.k1))
            .collect();
        for &l in &setup.stage1 {
            plan.extend(stage1_entries(l, &elements, layout, setup));
        }
    }

    let h_layer = *setup.stage1.last().unwrap();
    let p: Vec<Vec<f64>> = (0..n_el)
        .map(|i| {
            let mut v = mean_hidden(modulated, h_layer, &elements[i].key_set);
            v.extend(mean_hidden(modulated, h_layer, &layout.elements[i].text()));
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / norm).collect()
        })
        .collect();
    let pq = &p[n_el - 1];
    let similarities: Vec<f64> = p[..n_el - 1]
        .iter()
        .map(|pi| {
            let dot: f64 = pi.iter().zip(pq).map(|(a, b)| a * b).sum();
            let na = pi.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = pq.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        })
        .collect();
    let w = floored_softmax(&similarities);

    let n = layout.n_shots;
    let mut heads = Vec::new();
    for &l in &setup.stage2 {
        let rho = flow(modulated, l, layout, setup.rho);
        let selected = top(&rho, setup.k2);
        for &h in &selected {
            for i in 0..n {
                let e = &layout.elements[i];
                let mut cols = elements[i].key_set.clone();
                cols.extend(e.text());
                cols.sort();
                cols.dedup();
                for c in cols {
                    plan.push(Entry {
                        layer: l,
                        head: Some(h),
                        column: c,
                        row_from: e.answer.end,
                        value: (n - i) as f64 / n as f64 * w[i],
                    });
                }
            }
        }
        heads.push((l, rho, selected));
    }
    Expected {
        elements,
        heads,
        p,
        similarities,
        w,
        plan,
    }
}

/// Accumulates the largest absolute deviation and any structural mismatch.
#[derive(Default)]
pub struct Checker {
    pub max_err: f64,
    pub compared: usize,
    /// Quantity holding `max_err`.
    pub worst: String,
    pub mismatches: Vec<String>,
}

impl Checker {
    pub fn num(&mut self, what: &str, reported: f64, expected: f64) {
        self.compared += 1;
        let err = (reported - expected).abs();
        let err = if err.is_nan() { f64::INFINITY } else { err };
        if err > self.max_err {
            self.max_err = err;
            self.worst = what.to_string();
        }
    }

    pub fn vec(&mut self, what: &str, reported: &Value, expected: &[f64]) {
        let r = reported.as_array().unwrap();
        if r.len() != expected.len() {
            self.fail(format!("{what}: length {} vs {}", r.len(), expected.len()));
            return;
        }
        for (a, b) in r.iter().zip(expected) {
            self.num(what, a.as_f64().unwrap(), *b);
        }
    }

    pub fn indices(&mut self, what: &str, reported: &Value, expected: &[usize]) {
        let r: Vec<usize> = reported
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_u64().unwrap() as usize)
            .collect();
        if r != expected {
            self.fail(format!("{what}: {r:?} vs {expected:?}"));
        }
    }

    pub fn fail(&mut self, msg: String) {
        if self.mismatches.len() < 20 {
            self.mismatches.push(msg);
        }
    }

    pub fn plan(&mut self, what: &str, reported: &[Entry], expected: &[Entry]) {
        let mut a = reported.to_vec();
        let mut b = expected.to_vec();
        a.sort_by_key(Entry::key);
        b.sort_by_key(Entry::key);
        if a.len() != b.len() {
            self.fail(format!("{what}: {} entries vs {}", a.len(), b.len()));
            return;
        }
        for (x, y) in a.iter().zip(&b) {
            if x.key() != y.key() {
                self.fail(format!("{what}: entry {:?} vs {:?}", x.key(), y.key()));
                return;
            }
            self.num(what, x.value, y.value);
        }
    }
}

/// Compares the JSON report of one run and the applied plan in the
/// modulated trace against `exp`.
pub fn check_report(report: &Value, exp: &Expected, modulated: &Trace, c: &mut Checker) {
    let els = report["key_report"]["elements"].as_array().unwrap();
    if els.len() != exp.elements.len() {
        c.fail(format!(
            "element count {} vs {}",
            els.len(),
            exp.elements.len()
        ));
        return;
    }
    for (i, (r, e)) in els.iter().zip(&exp.elements).enumerate() {
        let layers = r["layers"].as_array().unwrap();
        if layers.len() != e.layers.len() {
            c.fail(format!("element {i}: {} gain layers", layers.len()));
            continue;
        }
        for (rl, el) in layers.iter().zip(&e.layers) {
            if rl["layer"].as_u64() != Some(el.layer as u64) {
                c.fail(format!(
                    "element {i}: layer {} vs {}",
                    rl["layer"], el.layer
                ));
            }
            c.vec("P_q0", &rl["p_q0"], &el.p_q0);
            c.vec("P_a0", &rl["p_a0"], &el.p_a0);
            match (&el.p_alast, rl["p_alast"].is_null()) {
                (Some(p), false) => c.vec("P_alast", &rl["p_alast"], p),
                (None, true) => {}
                _ => c.fail(format!("element {i}: P_alast presence differs")),
            }
            c.vec("c1", &rl["c1"], &el.c1);
            c.vec("c2", &rl["c2"], &el.c2);
        }
        c.vec("s", &r["scores"], &e.scores);
        c.indices("K_I", &r["key_set"], &e.key_set);
        c.num("max_score", r["max_score"].as_f64().unwrap(), e.max_score);
    }
    let heads = report["head_report"]["layers"].as_array().unwrap();
    if heads.len() != exp.heads.len() {
        c.fail(format!(
            "head layers {} vs {}",
            heads.len(),
            exp.heads.len()
        ));
    }
    for (r, (l, rho, sel)) in heads.iter().zip(&exp.heads) {
        if r["layer"].as_u64() != Some(*l as u64) {
            c.fail(format!("head layer {} vs {l}", r["layer"]));
        }
        c.vec("rho", &r["rho"], rho);
        c.indices("H_QC", &r["selected"], sel);
    }
    let wr = &report["weight_report"];
    let n = exp.p.len() - 1;
    for i in 0..n {
        c.vec("p_i", &wr["p"][i]["values"], &exp.p[i]);
    }
    c.vec("p_query", &wr["p_query"]["values"], &exp.p[n]);
    c.vec("similarity", &wr["similarities"], &exp.similarities);
    c.vec("w", &wr["w"], &exp.w);
    let reported: Vec<Entry> = report["plan"]
        .as_array()
        .unwrap()
        .iter()
        .map(Entry::from_json)
        .collect();
    c.plan("report plan", &reported, &exp.plan);
    c.plan("applied plan", &modulated.plan, &exp.plan);
}
