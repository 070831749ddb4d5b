use super::{ParameterSet, TransformerModel, EOS_TOKEN};
use crate::error::Result;
use crate::tensor::{argmax, Segment, Tape};

impl TransformerModel {
    /// Logits at positions `from..T` of one sequence.
    fn logits_from(&self, tokens: &[u32], from: usize) -> Result<Vec<Vec<f64>>> {
        self.check_tokens(tokens)?;
        let t = tokens.len();
        let tape = Tape::new();
        let b = self.bind(&tape, &ParameterSet::default());
        let ids: Vec<usize> = tokens.iter().map(|&x| x as usize).collect();
        let positions: Vec<usize> = (0..t).collect();
        let x = self.embed(&tape, &b, &ids, &positions);
        let x = self.run_blocks(&tape, &b, 0, x, &[Segment { start: 0, len: t }], &[], None);
        let rows: Vec<usize> = (from..t).collect();
        let z = self.head(&b, x.select_rows(&rows)).value();
        Ok((0..rows.len()).map(|i| z.row(i).to_vec()).collect())
    }

    /// Greedy decoding: appends argmax tokens (ties to the lowest id) until
    /// `max_new` tokens, the end-of-sequence token, or the context limit.
    /// Returns the prompt followed by the generated tokens, without EOS.
    pub fn greedy_generate(&self, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
        self.greedy_generate_guided(prompt, max_new, &[])
    }

    /// Greedy decoding that first scores `guess` in a single teacher-forced
    /// pass and accepts its tokens for as long as they coincide with the
    /// argmax. Causal masking makes each accepted position's logits equal
    /// to the step-by-step ones, so the result is identical to
    /// [`Self::greedy_generate`]; a good guess just saves forward passes.
    pub fn greedy_generate_guided(&self, prompt: &[u32], max_new: usize, guess: &[u32]) -> Result<Vec<u32>> {
        self.check_tokens(prompt)?;
        let mut seq = prompt.to_vec();
        let limit = self.config.max_seq_len;
        let budget = |seq: &Vec<u32>| seq.len() - prompt.len() < max_new && seq.len() < limit;

        if !guess.is_empty() && budget(&seq) {
            let room = (limit - prompt.len()).min(max_new);
            let mut forced = prompt.to_vec();
            forced.extend(guess.iter().take(room.saturating_sub(1)));
            let rows = self.logits_from(&forced, prompt.len() - 1)?;
            for (i, row) in rows.iter().enumerate() {
                let next = argmax(row) as u32;
                if next == EOS_TOKEN {
                    return Ok(seq);
                }
                seq.push(next);
                if !budget(&seq) || guess.get(i) != Some(&next) {
                    break;
                }
            }
        }
        while budget(&seq) {
            let rows = self.logits_from(&seq, seq.len() - 1)?;
            let next = argmax(&rows[0]) as u32;
            if next == EOS_TOKEN {
                break;
            }
            seq.push(next);
        }
        Ok(seq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;
    use crate::model::ModelConfig;

    #[test]
    fn zero_budget_returns_prompt() {
        let m = TransformerModel::new(tiny_config()).unwrap();
        assert_eq!(m.greedy_generate(&[3, 4], 0).unwrap(), vec![3, 4]);
    }

    #[test]
    fn generation_is_deterministic_and_bounded() {
        let m = TransformerModel::new(tiny_config()).unwrap();
        let a = m.greedy_generate(&[3, 4, 5], 6).unwrap();
        let b = m.greedy_generate(&[3, 4, 5], 6).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 9);
        assert!(a[3..].iter().all(|&t| t != EOS_TOKEN));
    }

    #[test]
    fn guided_matches_unguided() {
        for seed in 0..6 {
            let cfg = ModelConfig { seed, ..tiny_config() };
            let m = TransformerModel::new(cfg).unwrap();
            let plain = m.greedy_generate(&[1, 2], 8).unwrap();
            // the plain output itself, a wrong guess, and a partial guess
            let guesses: [Vec<u32>; 3] = [plain[2..].to_vec(), vec![5, 5, 5, 5], plain[2..plain.len().min(4)].to_vec()];
            for g in guesses {
                assert_eq!(m.greedy_generate_guided(&[1, 2], 8, &g).unwrap(), plain);
            }
        }
    }

    #[test]
    fn stops_at_context_limit() {
        let m = TransformerModel::new(tiny_config()).unwrap();
        let prompt: Vec<u32> = (1..11).collect();
        let out = m.greedy_generate(&prompt, 50).unwrap();
        assert!(out.len() <= 12);
    }
}
