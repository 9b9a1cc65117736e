use crate::blocks::{InceptionConfig, SpatialAttentionConfig};
use crate::error::{Error, Result};

/// Widths and switches of the full network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_size: usize,
    pub class_count: usize,
    pub stem_filters: usize,
    pub stem_kernel: usize,
    /// Output widths of the batch-norm + 3x3 conv stages after the stem.
    pub conv_filters: Vec<usize>,
    pub inception1: InceptionConfig,
    /// Key/query/value width; `None` uses the channel count.
    pub attention_dim: Option<usize>,
    pub attention_dropout: f32,
    pub attention_residual: bool,
    pub sep_block_filters: Vec<usize>,
    pub spatial_attn: SpatialAttentionConfig,
    pub inception2: InceptionConfig,
    pub dense_units: usize,
    pub dropout_rate: f32,
    /// Running-statistics momentum of every batch norm.
    pub bn_momentum: f32,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 224,
            class_count: 4,
            stem_filters: 64,
            stem_kernel: 7,
            conv_filters: vec![64, 192],
            inception1: InceptionConfig::new(64, 96, 128, 16, 32, 32),
            attention_dim: None,
            attention_dropout: 0.1,
            attention_residual: true,
            sep_block_filters: vec![128, 256],
            spatial_attn: SpatialAttentionConfig::default(),
            inception2: InceptionConfig::new(192, 96, 208, 16, 48, 64),
            dense_units: 512,
            dropout_rate: 0.5,
            bn_momentum: crate::nn::DEFAULT_MOMENTUM,
            seed: 0,
        }
    }
}

fn parse_list(value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|v| v.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad integer {v:?} in list {value:?}"))))
        .collect()
}

fn join(values: &[usize]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

pub(crate) fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn inception(key: &str, value: &str) -> Result<InceptionConfig> {
    match parse_list(value)?.as_slice() {
        &[a, b, c, d, e, f] => Ok(InceptionConfig::new(a, b, c, d, e, f)),
        _ => Err(Error::Config(format!("{key} needs six comma-separated filter counts"))),
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::Config(format!("class_count must be >= 2, got {}", self.class_count)));
        }
        if self.stem_filters == 0 || self.stem_kernel == 0 || self.dense_units == 0 {
            return Err(Error::Config("stem_filters, stem_kernel and dense_units must be positive".into()));
        }
        if self.conv_filters.contains(&0) || self.sep_block_filters.contains(&0) {
            return Err(Error::Config("filter counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) || !(0.0..1.0).contains(&self.attention_dropout) {
            return Err(Error::Config("dropout rates must lie in [0, 1)".into()));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return Err(Error::Config(format!("bn_momentum must lie in (0, 1), got {}", self.bn_momentum)));
        }
        self.inception1.validate()?;
        self.inception2.validate()?;
        Ok(())
    }

    /// Set one field from its `key = value` spelling. Returns false for keys
    /// that do not belong to the model.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "input_size" => self.input_size = parse(key, value)?,
            "class_count" => self.class_count = parse(key, value)?,
            "stem_filters" => self.stem_filters = parse(key, value)?,
            "stem_kernel" => self.stem_kernel = parse(key, value)?,
            "conv_filters" => self.conv_filters = parse_list(value)?,
            "inception1" => self.inception1 = inception(key, value)?,
            "inception2" => self.inception2 = inception(key, value)?,
            "attention_dim" => {
                let d: usize = parse(key, value)?;
                self.attention_dim = (d > 0).then_some(d);
            }
            "attention_dropout" => self.attention_dropout = parse(key, value)?,
            "attention_residual" => self.attention_residual = parse(key, value)?,
            "sep_block_filters" => self.sep_block_filters = parse_list(value)?,
            "spatial_dilations" => self.spatial_attn.dilations = parse_list(value)?,
            "spatial_filters" => {
                let f: usize = parse(key, value)?;
                self.spatial_attn.filters = (f > 0).then_some(f);
            }
            "spatial_kernel" => self.spatial_attn.kernel = parse(key, value)?,
            "dense_units" => self.dense_units = parse(key, value)?,
            "dropout_rate" => self.dropout_rate = parse(key, value)?,
            "bn_momentum" => self.bn_momentum = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Every field as `(key, value)` in a fixed order; `set` accepts each pair.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("input_size", self.input_size.to_string()),
            ("class_count", self.class_count.to_string()),
            ("stem_filters", self.stem_filters.to_string()),
            ("stem_kernel", self.stem_kernel.to_string()),
            ("conv_filters", join(&self.conv_filters)),
            ("inception1", join(&self.inception1.to_list())),
            ("attention_dim", self.attention_dim.unwrap_or(0).to_string()),
            ("attention_dropout", self.attention_dropout.to_string()),
            ("attention_residual", self.attention_residual.to_string()),
            ("sep_block_filters", join(&self.sep_block_filters)),
            ("spatial_dilations", join(&self.spatial_attn.dilations)),
            ("spatial_filters", self.spatial_attn.filters.unwrap_or(0).to_string()),
            ("spatial_kernel", self.spatial_attn.kernel.to_string()),
            ("inception2", join(&self.inception2.to_list())),
            ("dense_units", self.dense_units.to_string()),
            ("dropout_rate", self.dropout_rate.to_string()),
            ("bn_momentum", self.bn_momentum.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}
