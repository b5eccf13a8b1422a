use crate::error::Result;
use crate::models::Model;
use crate::seed;
use crate::trainer::{train, TrainConfig, TrainData};

use super::{Evaluator, SearchSpace};

/// Scores a point by training its model briefly and reporting the final
/// validation PSNR.
pub struct MiniTrainEvaluator {
    pub data: TrainData,
    pub config: TrainConfig,
    pub scale: usize,
}

impl MiniTrainEvaluator {
    /// Two epochs with the given base config.
    pub fn new(data: TrainData, mut config: TrainConfig, scale: usize) -> Self {
        if config.epochs == 0 {
            config.epochs = 2;
        }
        MiniTrainEvaluator {
            data,
            config,
            scale,
        }
    }
}

impl Evaluator for MiniTrainEvaluator {
    fn id(&self) -> String {
        format!("mini-train({} epochs)", self.config.epochs)
    }

    fn evaluate(&mut self, space: &SearchSpace, point: &[usize]) -> Result<f64> {
        let config = space.to_config(point, self.scale)?;
        let tag = format!("{:?}", space.values(point));
        let mut model = Model::build(&config, seed::derive(self.config.seed, &tag))?;
        let report = train(&mut model, &self.data, &self.config, None)?;
        let last = report.epochs.last().and_then(|e| e.val_psnr);
        last.ok_or_else(|| crate::Error::invalid("mini-train evaluation needs validation pairs"))
    }
}
