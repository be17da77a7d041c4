/// Inner training loop of the differentiable downstream classifier.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SurrogateConfig {
    pub lr: f64,
    pub n_epochs: usize,
    pub batch_size: usize,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            n_epochs: 15,
            batch_size: 256,
        }
    }
}
