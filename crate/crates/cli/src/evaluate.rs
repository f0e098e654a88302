//! Metric records for one encoder.

use anyhow::Result;
use un2clip_core::clip::ClipModel;
use un2clip_core::corpus::{BlindPair, Corpus, ShapeScene};
use un2clip_core::eval::{
    blind_pair_accuracy, dense_miou, retrieval_at_k, shape_prompts, zeroshot_classify,
    DenseVariant, MetricKind, MetricRecord,
};
use un2clip_core::io::config::EvalConfig;

pub struct Evaluator<'a> {
    pub corpus: &'a Corpus,
    pub digest: String,
    pub test: Vec<&'a ShapeScene>,
    pub eval: &'a EvalConfig,
}

impl<'a> Evaluator<'a> {
    pub fn new(corpus: &'a Corpus, eval: &'a EvalConfig) -> Self {
        Self {
            corpus,
            digest: corpus.digest(),
            test: corpus.split(un2clip_core::corpus::Split::Test),
            eval,
        }
    }

    pub fn record(&self, model: &str, metric: &str, kind: MetricKind, value: f64) -> MetricRecord {
        MetricRecord::new(&self.digest, model, metric, kind, value)
    }

    pub fn blind(
        &self,
        name: &str,
        clip: &ClipModel,
        pairs: &[BlindPair],
    ) -> Result<Vec<MetricRecord>> {
        let r = blind_pair_accuracy(clip, pairs, self.corpus)?;
        let mut out = vec![self.record(name, "blind_avg", MetricKind::Accuracy, r.average)];
        for f in r.per_family.iter().filter(|f| f.pairs > 0) {
            out.push(self.record(
                name,
                &format!("blind_{}", f.family),
                MetricKind::Accuracy,
                f.accuracy,
            ));
        }
        Ok(out)
    }

    pub fn dense(&self, name: &str, clip: &ClipModel) -> Result<Vec<MetricRecord>> {
        let prompts = shape_prompts();
        DenseVariant::ALL
            .iter()
            .map(|v| {
                let m = dense_miou(
                    clip,
                    &self.test,
                    &prompts,
                    *v,
                    self.eval.background_threshold,
                )?;
                Ok(self.record(name, &format!("miou_{}", v.name()), MetricKind::Accuracy, m))
            })
            .collect()
    }

    pub fn zeroshot(&self, name: &str, clip: &ClipModel) -> Result<Vec<MetricRecord>> {
        let acc = zeroshot_classify(clip, &self.test, &shape_prompts())?;
        let mut out = vec![self.record(name, "zeroshot_acc", MetricKind::Accuracy, acc)];
        for &k in &self.eval.retrieval_k {
            let r = retrieval_at_k(clip, &self.test, k.min(self.test.len()))?;
            out.push(self.record(name, &format!("recall@{k}"), MetricKind::Accuracy, r));
        }
        Ok(out)
    }
}
