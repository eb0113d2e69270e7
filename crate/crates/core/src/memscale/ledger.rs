use std::ops::AddAssign;

/// Which part of the architecture produced an attention-score matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    EncoderCross,
    EncoderSelf,
    Decoder,
}

/// Exact scalar counts per architecture stage. Stands in for device memory.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MemoryLedger {
    pub encoder_cross_scores: u64,
    pub encoder_self_scores: u64,
    pub decoder_scores: u64,
    pub activation_scalars: u64,
    pub parameter_scalars: u64,
}

impl MemoryLedger {
    pub fn record_scores(&mut self, stage: Stage, entries: u64) {
        match stage {
            Stage::EncoderCross => self.encoder_cross_scores += entries,
            Stage::EncoderSelf => self.encoder_self_scores += entries,
            Stage::Decoder => self.decoder_scores += entries,
        }
    }

    pub fn encoder_scores(&self) -> u64 {
        self.encoder_cross_scores + self.encoder_self_scores
    }

    pub fn attention_scores(&self) -> u64 {
        self.encoder_scores() + self.decoder_scores
    }

    /// Scores plus activations; parameters are reported separately.
    pub fn total(&self) -> u64 {
        self.attention_scores() + self.activation_scalars
    }

    pub fn merge(&mut self, other: &MemoryLedger) {
        *self += *other;
    }
}

impl AddAssign for MemoryLedger {
    fn add_assign(&mut self, o: MemoryLedger) {
        self.encoder_cross_scores += o.encoder_cross_scores;
        self.encoder_self_scores += o.encoder_self_scores;
        self.decoder_scores += o.decoder_scores;
        self.activation_scalars += o.activation_scalars;
        self.parameter_scalars += o.parameter_scalars;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_is_additive() {
        let mut a = MemoryLedger::default();
        a.record_scores(Stage::EncoderCross, 10);
        a.activation_scalars = 5;
        let mut b = MemoryLedger::default();
        b.record_scores(Stage::Decoder, 7);
        b.record_scores(Stage::EncoderCross, 1);
        a.merge(&b);
        assert_eq!(a.encoder_cross_scores, 11);
        assert_eq!(a.decoder_scores, 7);
        assert_eq!(a.total(), 23);
    }
}
