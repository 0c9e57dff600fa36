//! Self-checking suites behind `dot verify`.

use anyhow::Result;
use dot_core::dot::{dot_loss, prepare_all, DoTConfig, DoTModel, LossMode};
use dot_core::encoder::{count_parameters, EncoderConfig, EncoderWeights};
use dot_core::pruning::hard_drop_equivalence;
use dot_core::synth::{generate, GeneratorSpec, Span, SynthTask};
use dot_core::table::{cc_select, linearize_full, TaskType, Vocabulary};
use dot_core::tensor::{gradient_check, GradCheckOptions, Graph, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const HARD_DROP_TOLERANCE: f64 = 1e-9;

/// Published model sizes in millions, one decimal. The published figures mix
/// rounding and truncation, so a count matches when it lies within 0.1M.
pub const REFERENCE_SIZES: [(&str, f64); 5] = [
    ("TAPAS(mini)@256", 11.1),
    ("TAPAS(s)@512", 28.2),
    ("TAPAS(m)@1024", 46.6),
    ("TAPAS(l)@512", 272.6),
    ("DoT(m→256→l)@1024", 299.8),
];

#[derive(Debug, Clone, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub suites: Vec<SuiteResult>,
    pub passed: bool,
}

pub type Formula = fn(&EncoderConfig, usize) -> dot_core::Result<u64>;

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seed: u64,
    pub hard_drop_cases: usize,
    pub grad_coords: usize,
    /// Parameter formula under test.
    pub formula: Formula,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            hard_drop_cases: 100,
            grad_coords: 8,
            formula: count_parameters,
        }
    }
}

/// A DoT with `layers`-deep, `hidden`-wide stages over small synthetic tables,
/// with its prepared examples.
pub fn tiny_dot(
    task: SynthTask,
    loss: LossMode,
    layers: usize,
    hidden: usize,
    seed: u64,
) -> Result<(DoTModel, ParamStore<f64>, Vec<dot_core::dot::Prepared>)> {
    let mut gs = GeneratorSpec::lookup(seed, 4);
    gs.task = task;
    gs.rows = Span::new(2, 3);
    gs.cols = Span::new(2, 3);
    gs.vocab_size = 60;
    let exs = generate(&gs)?;
    let vocab = Vocabulary::build(&exs);
    let enc = EncoderConfig::new(layers, hidden, 2, 2 * hidden)
        .with_vocab(vocab.len())
        .with_max_input(48)
        .with_dropout(0.0, 0.0);
    let mut cfg = DoTConfig::new(Some(enc.clone()), enc, 40, 12);
    cfg.loss = loss;
    if task == SynthTask::Entailment {
        cfg.task_type = TaskType::Classification;
    }
    let mut store = ParamStore::new();
    let model = DoTModel::init(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let data = prepare_all(&cfg, &exs, &vocab)?;
    Ok((model, store, data))
}

/// Multiplies every kernel and embedding by `factor`. At the 0.02 init the
/// gradients that reach the pruning stage through the bias sit near 1e-9,
/// where central differences in 64-bit are mostly rounding noise.
pub fn widen(store: &mut ParamStore<f64>, factor: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.get(id).decay {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// Softmax ignores a shift shared by a whole row, so key biases get an
/// exactly zero gradient; finite differences there return rounding noise.
pub const ZERO_GRADIENT_SUFFIX: &str = "attention.self.key.bias";

/// Central differences over the full DoT loss. P mode is left out: its task
/// term reads a detached bias, so its gradient is deliberately not the
/// derivative of its value.
pub fn gradient_suite(layers: usize, hidden: usize, coords: usize, seed: u64) -> Result<SuiteResult> {
    let cases = [
        ("lookup/J", SynthTask::Lookup, LossMode::J),
        ("lookup/PJ", SynthTask::Lookup, LossMode::PJ),
        ("entailment/J", SynthTask::Entailment, LossMode::J),
    ];
    let mut max_error = 0.0f64;
    let mut failures = Vec::new();
    for (name, task, loss) in cases {
        let (model, mut store, data) = tiny_dot(task, loss, layers, hidden, seed)?;
        widen(&mut store, 15.0);
        let prepared = &data[0];
        let build = |s: &ParamStore<f64>| -> dot_core::Result<(Graph<f64>, dot_core::tensor::Var)> {
            let mut g = Graph::new();
            let (_, parts) = dot_loss(&mut g, s, &model, prepared, None)?;
            Ok((g, parts.total))
        };
        let (zero, checked): (Vec<_>, Vec<_>) = store.ids().partition(|&id| store.get(id).name.ends_with(ZERO_GRADIENT_SUFFIX));
        let (g, loss) = build(&store)?;
        let grads = g.backward(loss)?;
        let stray = zero
            .iter()
            .filter_map(|&id| grads.param(id))
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if stray > 1e-12 {
            failures.push(format!("{name}: key-bias gradient {stray:.3e} should vanish"));
        }
        let opts = GradCheckOptions {
            max_coords_per_param: Some(coords),
            params: Some(checked),
            ..GradCheckOptions::default()
        };
        let report = gradient_check(&mut store, &opts, build)?;
        max_error = max_error.max(report.max_rel_error);
        if !(report.max_rel_error < GRAD_TOLERANCE) {
            failures.push(format!(
                "{name}: {:.3e} at {}[{}] (analytic {:.4e}, numeric {:.4e})",
                report.max_rel_error, report.worst_param, report.worst_index, report.worst_analytic, report.worst_numeric
            ));
        }
    }
    Ok(SuiteResult {
        name: "gradient".into(),
        cases: cases.len(),
        max_error,
        tolerance: GRAD_TOLERANCE,
        passed: failures.is_empty(),
        failures,
    })
}

/// Masked versus compacted forward passes of mini and small encoders on
/// random inputs of at most 32 tokens with random table tokens dropped.
pub fn hard_drop_suite(cases: usize, seed: u64) -> Result<SuiteResult> {
    let mut gs = GeneratorSpec::lookup(seed, cases.max(1));
    gs.rows = Span::new(1, 4);
    gs.cols = Span::new(2, 3);
    gs.cell_tokens = Span::new(1, 3);
    gs.distractor_ratio = 0.5;
    let exs = generate(&gs)?;
    let vocab = Vocabulary::build(&exs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let encoders: Vec<EncoderWeights> = ["mini", "small"]
        .iter()
        .map(|name| {
            let cfg = EncoderConfig::preset(name)?.with_vocab(vocab.len()).with_max_input(32);
            Ok(EncoderWeights::init(&mut store, &format!("{name}."), &cfg, &mut rng)?)
        })
        .collect::<Result<_>>()?;

    let mut max_error = 0.0f64;
    let mut failures = Vec::new();
    for (i, ex) in exs.iter().take(cases).enumerate() {
        let mut seq = cc_select(&linearize_full(ex, &vocab), 32)?;
        seq.position_ids = (0..seq.len()).collect();
        let table: Vec<usize> = seq.table_indices().collect();
        let mut drop: Vec<usize> = table.iter().copied().filter(|_| rng.gen_bool(0.5)).collect();
        if drop.is_empty() && !table.is_empty() {
            drop.push(table[rng.gen_range(0..table.len())]);
        }
        let w = &encoders[i % encoders.len()];
        let diff = hard_drop_equivalence(&store, w, &seq, &drop)?;
        max_error = max_error.max(diff);
        if !(diff < HARD_DROP_TOLERANCE) {
            failures.push(format!("case {i} ({} tokens, {} dropped): {diff:.3e}", seq.len(), drop.len()));
        }
    }
    Ok(SuiteResult {
        name: "hard_drop".into(),
        cases,
        max_error,
        tolerance: HARD_DROP_TOLERANCE,
        passed: failures.is_empty(),
        failures,
    })
}

/// Parameter formula against the accounting walk over allocated tensors for
/// every preset, then against the published sizes.
pub fn param_suite(formula: Formula) -> Result<SuiteResult> {
    let mut failures = Vec::new();
    let mut cases = 0;
    let mut max_error = 0.0f64;
    for name in ["mini", "small", "medium", "large"] {
        let cfg = EncoderConfig::preset(name)?;
        let mut store = ParamStore::<f32>::new();
        let w = EncoderWeights::zeroed(&mut store, "", &cfg)?;
        for input in [256, 512, 1024] {
            cases += 1;
            let walked = w.accounted_count(&store, input);
            let f = formula(&cfg, input)?;
            max_error = max_error.max(f.abs_diff(walked) as f64);
            if f != walked {
                failures.push(format!("{name}@{input}: formula {f}, tensors {walked}"));
            }
        }
    }
    for (gs, millions) in REFERENCE_SIZES {
        cases += 1;
        let n = crate::params::count_with(&crate::params::parse(gs)?, |c, i| Ok(formula(c, i)?))?;
        let m = n as f64 / 1e6;
        if !((m - millions).abs() < 0.1) {
            failures.push(format!("{gs}: {m:.3}M, published {millions}M"));
        }
    }
    Ok(SuiteResult {
        name: "parameter_count".into(),
        cases,
        max_error,
        tolerance: 0.0,
        passed: failures.is_empty(),
        failures,
    })
}

pub fn run(opts: &VerifyOptions) -> Result<VerifyReport> {
    let suites = vec![
        gradient_suite(2, 32, opts.grad_coords, opts.seed)?,
        hard_drop_suite(opts.hard_drop_cases, opts.seed)?,
        param_suite(opts.formula)?,
    ];
    let passed = suites.iter().all(|s| s.passed);
    Ok(VerifyReport { suites, passed })
}
