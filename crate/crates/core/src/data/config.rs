use serde::{Deserialize, Serialize};

/// Layer settings of one encoder/decoder column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSpec {
    pub conv_filters: usize,
    /// Temporal kernel width; the kernel height is always the channel count.
    pub conv_kernel: usize,
    pub pool: usize,
    pub dropout: f64,
    pub lstm_units: usize,
    pub lstm_dropout: f64,
    pub dec_lstm_units: usize,
    pub dec_lstm_dropout: f64,
    pub dec_rows: usize,
    pub dec_cols: usize,
    pub dec_filters: usize,
}

impl ColumnSpec {
    #[allow(clippy::too_many_arguments)]
    pub const fn new(
        conv_filters: usize,
        conv_kernel: usize,
        pool: usize,
        dropout: f64,
        lstm_units: usize,
        lstm_dropout: f64,
        dec_lstm_units: usize,
        dec_lstm_dropout: f64,
        dec_reshape: (usize, usize),
        dec_filters: usize,
    ) -> Self {
        ColumnSpec {
            conv_filters,
            conv_kernel,
            pool,
            dropout,
            lstm_units,
            lstm_dropout,
            dec_lstm_units,
            dec_lstm_dropout,
            dec_rows: dec_reshape.0,
            dec_cols: dec_reshape.1,
            dec_filters,
        }
    }

    /// Length of the valid convolution output over a window of `window_len` samples.
    pub fn conv_len(&self, window_len: usize) -> usize {
        (window_len + 1).saturating_sub(self.conv_kernel)
    }

    pub fn pooled_len(&self, window_len: usize) -> usize {
        if self.pool == 0 {
            0
        } else {
            self.conv_len(window_len) / self.pool
        }
    }

    /// Flattened per-window feature width after conv, pool and flatten.
    pub fn flat_width(&self, window_len: usize) -> usize {
        self.pooled_len(window_len) * self.conv_filters
    }
}

/// Stage switches used by the backbone ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Backbone {
    /// When off, each window is flattened raw (`C·m`) instead of convolved.
    pub cnn: bool,
    /// When off, the per-window features are used directly as the hidden sequence.
    pub lstm: bool,
    /// When off, the latent is the plain mean over windows.
    pub attention: bool,
}

impl Default for Backbone {
    fn default() -> Self {
        Backbone {
            cnn: true,
            lstm: true,
            attention: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channel_count: usize,
    pub window_len: usize,
    pub step: usize,
    pub upsample_rows: usize,
    pub class_count: usize,
    pub columns: Vec<ColumnSpec>,
    pub fc_hidden: usize,
    pub l2_factor: f64,
    pub backbone: Backbone,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

/// Horizontal upsampling factor of every decoder column.
pub const UPSAMPLE_COLS: usize = 4;

impl ModelConfig {
    fn table_columns() -> Vec<ColumnSpec> {
        vec![
            ColumnSpec::new(64, 50, 80, 0.5, 64, 0.4, 100, 0.2, (2, 50), 64),
            ColumnSpec::new(40, 45, 75, 0.5, 40, 0.4, 40, 0.4, (2, 20), 40),
            ColumnSpec::new(30, 15, 35, 0.5, 30, 0.2, 30, 0.2, (2, 15), 30),
        ]
    }

    /// 64 channels at 160 Hz, two classes, `p = 20`, `U = 4`.
    pub fn physionet() -> Self {
        ModelConfig {
            channel_count: 64,
            window_len: 400,
            step: 20,
            upsample_rows: 4,
            class_count: 2,
            columns: Self::table_columns(),
            fc_hidden: 128,
            l2_factor: 0.0005,
            backbone: Backbone::default(),
            bn_momentum: 0.99,
            bn_eps: 1e-3,
        }
    }

    /// 22 channels at 250 Hz, four classes, `p = 50`, `U = 2`.
    pub fn bci_iv_2a() -> Self {
        ModelConfig {
            channel_count: 22,
            window_len: 400,
            step: 50,
            upsample_rows: 2,
            class_count: 4,
            ..Self::physionet()
        }
    }

    /// Small configuration for CPU-scale runs: 8 channels, 64-sample windows.
    pub fn desk() -> Self {
        ModelConfig {
            channel_count: 8,
            window_len: 64,
            step: 16,
            upsample_rows: 2,
            class_count: 2,
            columns: vec![
                ColumnSpec::new(8, 16, 8, 0.2, 12, 0.1, 12, 0.1, (2, 6), 4),
                ColumnSpec::new(6, 9, 6, 0.2, 10, 0.1, 10, 0.1, (2, 5), 4),
                ColumnSpec::new(4, 5, 4, 0.2, 8, 0.1, 8, 0.1, (2, 4), 4),
            ],
            fc_hidden: 32,
            l2_factor: 0.0005,
            backbone: Backbone::default(),
            bn_momentum: 0.99,
            bn_eps: 1e-3,
        }
    }

    /// Tiny configuration used by the gradient checks: `C = 4`, `m = 20`, three windows.
    pub fn miniature() -> Self {
        ModelConfig {
            channel_count: 4,
            window_len: 20,
            step: 5,
            upsample_rows: 2,
            class_count: 2,
            columns: vec![
                ColumnSpec::new(3, 6, 5, 0.0, 4, 0.0, 6, 0.0, (2, 3), 2),
                ColumnSpec::new(2, 4, 4, 0.0, 3, 0.0, 4, 0.0, (2, 2), 2),
            ],
            fc_hidden: 5,
            l2_factor: 0.0005,
            backbone: Backbone::default(),
            bn_momentum: 0.99,
            bn_eps: 1e-3,
        }
    }

    pub fn window_count(&self, samples: usize) -> usize {
        if samples < self.window_len || self.step == 0 {
            0
        } else {
            (samples - self.window_len) / self.step + 1
        }
    }

    /// Width of the per-window feature entering the encoder LSTM.
    pub fn feature_width(&self, column: usize) -> usize {
        let col = &self.columns[column];
        if self.backbone.cnn {
            col.flat_width(self.window_len)
        } else {
            self.channel_count * self.window_len
        }
    }

    /// Width of the latent `v` of one column.
    pub fn latent_width(&self, column: usize) -> usize {
        if self.backbone.lstm {
            self.columns[column].lstm_units
        } else {
            self.feature_width(column)
        }
    }

    pub fn concat_width(&self) -> usize {
        (0..self.columns.len()).map(|c| self.latent_width(c)).sum()
    }

    /// Height and width of the decoder grid after upsampling.
    pub fn decoder_grid(&self, column: usize) -> (usize, usize) {
        let col = &self.columns[column];
        (
            col.dec_rows * self.upsample_rows,
            col.dec_cols * UPSAMPLE_COLS,
        )
    }

    /// Keep only column `k`.
    pub fn single_column(&self, k: usize) -> Option<Self> {
        let col = self.columns.get(k)?.clone();
        Some(ModelConfig {
            columns: vec![col],
            ..self.clone()
        })
    }
}

/// Weights of the composite objective: `beta` (reconstruction) and `eta` (distance
/// preservation) per column, `gamma` on the center loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta: Vec<f64>,
    pub eta: Vec<f64>,
    pub gamma: f64,
}

impl LossWeights {
    /// `β = [0.2, 0.1, 0.2]`, `η = [0.1, 0.1, 0.1]`, `γ = 0.3`.
    pub fn published() -> Self {
        LossWeights {
            beta: vec![0.2, 0.1, 0.2],
            eta: vec![0.1, 0.1, 0.1],
            gamma: 0.3,
        }
    }

    pub fn uniform(columns: usize, beta: f64, eta: f64, gamma: f64) -> Self {
        LossWeights {
            beta: vec![beta; columns],
            eta: vec![eta; columns],
            gamma,
        }
    }

    pub fn validate(&self, columns: usize) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.beta.len() != columns {
            out.push(Violation::new(
                "beta",
                format!("length {} differs from column count {columns}", self.beta.len()),
            ));
        }
        if self.eta.len() != columns {
            out.push(Violation::new(
                "eta",
                format!("length {} differs from column count {columns}", self.eta.len()),
            ));
        }
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !self.beta.iter().copied().all(finite_nonneg) {
            out.push(Violation::new("beta", "weights must be finite and >= 0"));
        }
        if !self.eta.iter().copied().all(finite_nonneg) {
            out.push(Violation::new("eta", "weights must be finite and >= 0"));
        }
        if !finite_nonneg(self.gamma) {
            out.push(Violation::new("gamma", "weight must be finite and >= 0"));
        }
        out
    }

    pub fn total(&self) -> f64 {
        self.beta.iter().sum::<f64>() + self.eta.iter().sum::<f64>() + self.gamma
    }
}

/// One broken configuration rule.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl Violation {
    pub fn new(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Violation {
            field: field.into(),
            rule: rule.into(),
        }
    }
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

/// Checks every structural rule of a model configuration. An empty list means valid.
pub fn validate_config(cfg: &ModelConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |field: String, rule: &str| out.push(Violation::new(field, rule));

    if cfg.channel_count == 0 {
        push("channel_count".into(), "must be >= 1");
    }
    if cfg.window_len == 0 {
        push("window_len".into(), "must be >= 1");
    }
    if cfg.step == 0 {
        push("step".into(), "must be >= 1");
    }
    if cfg.upsample_rows == 0 {
        push("upsample_rows".into(), "must be >= 1");
    }
    if cfg.class_count < 2 {
        push("class_count".into(), "must be >= 2");
    }
    if cfg.fc_hidden == 0 {
        push("fc_hidden".into(), "must be > 0");
    }
    if !(cfg.l2_factor.is_finite() && cfg.l2_factor >= 0.0) {
        push("l2_factor".into(), "must be finite and >= 0");
    }
    if !(cfg.bn_momentum >= 0.0 && cfg.bn_momentum < 1.0) {
        push("bn_momentum".into(), "must lie in [0, 1)");
    }
    if !(cfg.bn_eps > 0.0) {
        push("bn_eps".into(), "must be > 0");
    }
    if cfg.columns.is_empty() {
        push("columns".into(), "at least one column is required");
    }
    let rate_ok = |r: f64| (0.0..1.0).contains(&r);
    for (i, col) in cfg.columns.iter().enumerate() {
        let f = |name: &str| format!("columns[{i}].{name}");
        if col.conv_filters == 0 {
            push(f("conv_filters"), "must be >= 1");
        }
        if col.conv_kernel == 0 {
            push(f("conv_kernel"), "must be >= 1");
        } else if cfg.backbone.cnn && col.conv_kernel > cfg.window_len {
            push(f("conv_kernel"), "kernel wider than the window");
        }
        if col.pool == 0 {
            push(f("pool"), "must be >= 1");
        } else if cfg.backbone.cnn
            && col.conv_kernel <= cfg.window_len
            && col.pooled_len(cfg.window_len) == 0
        {
            push(f("pool"), "pool wider than the convolution output");
        }
        if !rate_ok(col.dropout) {
            push(f("dropout"), "rate must lie in [0, 1)");
        }
        if !rate_ok(col.lstm_dropout) {
            push(f("lstm_dropout"), "rate must lie in [0, 1)");
        }
        if !rate_ok(col.dec_lstm_dropout) {
            push(f("dec_lstm_dropout"), "rate must lie in [0, 1)");
        }
        if col.lstm_units == 0 {
            push(f("lstm_units"), "must be >= 1");
        }
        if col.dec_filters == 0 {
            push(f("dec_filters"), "must be >= 1");
        }
        if col.dec_rows == 0 || col.dec_cols == 0 {
            push(f("dec_rows"), "reshape dimensions must be >= 1");
        }
        if col.dec_rows * col.dec_cols != col.dec_lstm_units {
            push(f("dec_lstm_units"), "reshape product ≠ lstm units");
        }
    }
    out
}
