//! Multi-digit addition with a column-by-column scratchpad.
//!
//! Token table (17 ids): digits `0`–`9` are ids 0–9, then `+` 10, `=` 11,
//! `C` 12, `A` 13, BOS 14, EOS 15, PAD 16.
//!
//! Operands are written most-significant digit first, zero-padded to the
//! maximum digit count of the generator's range. The expert response walks
//! the columns least-significant first emitting `sum mod 10`, `C`, `carry`
//! for each column, then `A`, the answer digits most-significant first, and
//! EOS. For `12+34` (width 2):
//!
//! ```text
//! prompt:   BOS 1 2 + 3 4 =
//! response: 6 C 0 4 C 0 A 4 6 EOS
//! ```

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{invalid_config, Result};
use crate::policy::Vocab;
use crate::rng::DetRng;

pub const PLUS: usize = 10;
pub const EQUALS: usize = 11;
pub const CARRY: usize = 12;
pub const ANSWER: usize = 13;
pub const BOS: usize = 14;
pub const EOS: usize = 15;
pub const PAD: usize = 16;
pub const VOCAB_SIZE: usize = 17;

pub fn vocab() -> Vocab {
    Vocab {
        size: VOCAB_SIZE,
        bos: BOS,
        eos: EOS,
        pad: PAD,
    }
}

/// Printable form of one token.
pub fn token_text(id: usize) -> &'static str {
    const TEXT: [&str; VOCAB_SIZE] = [
        "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "+", "=", "C", "A", "<bos>", "<eos>", "<pad>",
    ];
    TEXT.get(id).copied().unwrap_or("<?>")
}

pub fn render(tokens: &[usize]) -> String {
    tokens.iter().map(|&t| token_text(t)).collect()
}

/// Outcome reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Reward {
    Correct,
    Incorrect,
}

impl Reward {
    pub fn value(self) -> f64 {
        match self {
            Reward::Correct => 1.0,
            Reward::Incorrect => -1.0,
        }
    }

    pub fn from_value(v: i64) -> Option<Self> {
        match v {
            1 => Some(Reward::Correct),
            -1 => Some(Reward::Incorrect),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskInstance {
    pub a: u32,
    pub b: u32,
    pub prompt: Vec<usize>,
    pub expert_response: Vec<usize>,
    pub truth: u64,
}

/// Inclusive operand digit-count range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct DigitRange {
    pub min: u32,
    pub max: u32,
}

impl DigitRange {
    pub fn new(min: u32, max: u32) -> Result<Self> {
        if !(1 <= min && min <= max && max <= 3) {
            return Err(invalid_config!("digit range [{min}, {max}] must lie within [1, 3]"));
        }
        Ok(Self { min, max })
    }

    /// Smallest and largest operand value.
    pub fn bounds(&self) -> (u32, u32) {
        let lo = if self.min == 1 { 0 } else { 10u32.pow(self.min - 1) };
        (lo, 10u32.pow(self.max) - 1)
    }

    /// Longest prompt plus expert response.
    pub fn max_sequence_len(&self) -> usize {
        let w = self.max as usize;
        // BOS a + b =  |  3 per column, A, up to w+1 answer digits, EOS
        (2 * w + 3) + (3 * w + 1 + (w + 1) + 1)
    }
}

fn digits_msb(mut n: u64, width: usize) -> Vec<usize> {
    let mut out = alloc::vec![0usize; width];
    for slot in out.iter_mut().rev() {
        *slot = (n % 10) as usize;
        n /= 10;
    }
    out
}

fn answer_digits(n: u64) -> Vec<usize> {
    let mut out = Vec::new();
    let mut n = n;
    loop {
        out.push((n % 10) as usize);
        n /= 10;
        if n == 0 {
            break;
        }
    }
    out.reverse();
    out
}

impl TaskInstance {
    /// Builds `a + b` with operands padded to `width` digits.
    pub fn new(a: u32, b: u32, width: usize) -> Self {
        let da = digits_msb(a as u64, width);
        let db = digits_msb(b as u64, width);
        let mut prompt = Vec::with_capacity(2 * width + 3);
        prompt.push(BOS);
        prompt.extend(&da);
        prompt.push(PLUS);
        prompt.extend(&db);
        prompt.push(EQUALS);

        let truth = a as u64 + b as u64;
        let mut response = Vec::new();
        let mut carry = 0;
        for col in (0..width).rev() {
            let s = da[col] + db[col] + carry;
            carry = s / 10;
            response.push(s % 10);
            response.push(CARRY);
            response.push(carry);
        }
        response.push(ANSWER);
        response.extend(answer_digits(truth));
        response.push(EOS);
        Self {
            a,
            b,
            prompt,
            expert_response: response,
            truth,
        }
    }

    /// Prompt followed by the expert response.
    pub fn full_sequence(&self) -> Vec<usize> {
        let mut s = self.prompt.clone();
        s.extend(&self.expert_response);
        s
    }
}

/// `count` instances drawn from the operand range; a pure function of `seed`.
pub fn generate_instances(seed: u64, count: usize, digits: DigitRange) -> Vec<TaskInstance> {
    let mut rng = DetRng::new(seed, 0);
    let (lo, hi) = digits.bounds();
    let span = (hi - lo + 1) as usize;
    let width = digits.max as usize;
    (0..count)
        .map(|_| {
            let a = lo + rng.below(span) as u32;
            let b = lo + rng.below(span) as u32;
            TaskInstance::new(a, b, width)
        })
        .collect()
}

/// A rollout prompt. The expert response is withheld.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RolloutPrompt {
    pub id: usize,
    pub prompt: Vec<usize>,
    pub truth: u64,
}

impl From<&TaskInstance> for RolloutPrompt {
    fn from(t: &TaskInstance) -> Self {
        Self {
            id: 0,
            prompt: t.prompt.clone(),
            truth: t.truth,
        }
    }
}

/// `+1` iff the response holds exactly one `A`, followed by at least one
/// digit and then EOS as the final token, and those digits spell `truth`.
pub fn verify(instance: &TaskInstance, response: &[usize]) -> Reward {
    verify_answer(instance.truth, response)
}

/// [`verify`] against a bare expected answer.
pub fn verify_answer(truth: u64, response: &[usize]) -> Reward {
    let mut markers = response.iter().enumerate().filter(|(_, &t)| t == ANSWER);
    let Some((pos, _)) = markers.next() else {
        return Reward::Incorrect;
    };
    if markers.next().is_some() {
        return Reward::Incorrect;
    }
    let tail = &response[pos + 1..];
    let Some((&last, digits)) = tail.split_last() else {
        return Reward::Incorrect;
    };
    if last != EOS || digits.is_empty() || digits.iter().any(|&t| t > 9) {
        return Reward::Incorrect;
    }
    let mut value: u64 = 0;
    for &d in digits {
        value = match value.checked_mul(10).and_then(|v| v.checked_add(d as u64)) {
            Some(v) => v,
            None => return Reward::Incorrect,
        };
    }
    if value == truth {
        Reward::Correct
    } else {
        Reward::Incorrect
    }
}

/// Expert demonstrations and prompt-only rollout instances.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertSplit {
    pub expert: Vec<TaskInstance>,
    pub rollout: Vec<RolloutPrompt>,
}

/// Deterministic split: a seeded permutation, the first
/// `round(fraction · n)` instances become expert demonstrations.
pub fn split_expert_pool(instances: &[TaskInstance], expert_fraction: f64, seed: u64) -> Result<ExpertSplit> {
    if !(expert_fraction > 0.0 && expert_fraction < 1.0) {
        return Err(invalid_config!("expert_fraction {expert_fraction} must lie in (0, 1)"));
    }
    let mut order: Vec<usize> = (0..instances.len()).collect();
    DetRng::new(seed, 7).shuffle(&mut order);
    let n_expert = crate::math::round(expert_fraction * instances.len() as f64) as usize;
    let expert = order[..n_expert].iter().map(|&i| instances[i].clone()).collect();
    let rollout = order[n_expert..]
        .iter()
        .map(|&i| RolloutPrompt {
            id: i,
            ..RolloutPrompt::from(&instances[i])
        })
        .collect();
    Ok(ExpertSplit { expert, rollout })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twelve_plus_thirty_four() {
        let t = TaskInstance::new(12, 34, 2);
        assert_eq!(t.truth, 46);
        assert_eq!(render(&t.prompt), "<bos>12+34=");
        assert_eq!(render(&t.expert_response), "6C04C0A46<eos>");
        let n = t.expert_response.len();
        assert_eq!(&t.expert_response[n - 3..n - 1], &[4, 6]);
        assert_eq!(verify(&t, &t.expert_response), Reward::Correct);
    }

    #[test]
    fn carries_propagate() {
        let t = TaskInstance::new(95, 7, 2);
        assert_eq!(render(&t.prompt), "<bos>95+07=");
        assert_eq!(render(&t.expert_response), "2C10C1A102<eos>");
        let z = TaskInstance::new(0, 0, 2);
        assert_eq!(render(&z.expert_response), "0C00C0A0<eos>");
    }

    #[test]
    fn generation_is_deterministic() {
        let r = DigitRange::new(1, 2).unwrap();
        assert_eq!(generate_instances(5, 50, r), generate_instances(5, 50, r));
        assert_ne!(generate_instances(5, 50, r), generate_instances(6, 50, r));
    }

    #[test]
    fn generated_instances_verify() {
        let r = DigitRange::new(1, 2).unwrap();
        let all = generate_instances(99, 1000, r);
        for t in &all {
            assert!(t.truth <= 99 + 99);
            assert_eq!(verify(t, &t.expert_response), Reward::Correct);
            assert!(t.full_sequence().len() <= r.max_sequence_len());
        }
    }

    #[test]
    fn digit_range_bounds() {
        assert!(DigitRange::new(0, 2).is_err());
        assert!(DigitRange::new(2, 4).is_err());
        assert!(DigitRange::new(3, 2).is_err());
        assert_eq!(DigitRange::new(1, 2).unwrap().bounds(), (0, 99));
        assert_eq!(DigitRange::new(3, 3).unwrap().bounds(), (100, 999));
    }

    #[test]
    fn malformed_responses_fail() {
        let t = TaskInstance::new(12, 34, 2);
        let mut no_eos = t.expert_response.clone();
        no_eos.pop();
        assert_eq!(verify(&t, &no_eos), Reward::Incorrect);

        let mut wrong = t.expert_response.clone();
        let n = wrong.len();
        wrong[n - 2] = 7;
        assert_eq!(verify(&t, &wrong), Reward::Incorrect);

        assert_eq!(verify(&t, &[]), Reward::Incorrect);
        assert_eq!(verify(&t, &[ANSWER, EOS]), Reward::Incorrect);
        assert_eq!(verify(&t, &[ANSWER, 4, 6, EOS]), Reward::Correct);
        assert_eq!(verify(&t, &[ANSWER, 4, ANSWER, 6, EOS]), Reward::Incorrect);
        assert_eq!(verify(&t, &[ANSWER, 4, 6, EOS, 1]), Reward::Incorrect);
        assert_eq!(verify(&t, &[ANSWER, 4, CARRY, 6, EOS]), Reward::Incorrect);
        assert_eq!(
            verify(
                &t,
                &[ANSWER, 9, 9, 9, 9, 9, 9, 9, 9, 9, 9, 9, 9, 9, 9, 9, 9, 9, 9, 9, 9, 9, EOS]
            ),
            Reward::Incorrect
        );
    }

    #[test]
    fn split_counts() {
        let r = DigitRange::new(1, 2).unwrap();
        let all = generate_instances(1, 100, r);
        let s = split_expert_pool(&all, 0.2, 3).unwrap();
        assert_eq!((s.expert.len(), s.rollout.len()), (20, 80));
        let ten = generate_instances(1, 10, r);
        let s = split_expert_pool(&ten, 0.5, 3).unwrap();
        assert_eq!((s.expert.len(), s.rollout.len()), (5, 5));
        assert_eq!(
            split_expert_pool(&all, 0.2, 3).unwrap(),
            split_expert_pool(&all, 0.2, 3).unwrap()
        );
        for bad in [0.0, 1.0, -0.1, 1.5] {
            assert!(split_expert_pool(&all, bad, 3).is_err());
        }
    }

    proptest::proptest! {
        #[test]
        fn flipping_an_answer_digit_fails(a in 0u32..1000, b in 0u32..1000, pick in 0usize..8, delta in 1usize..10) {
            let t = TaskInstance::new(a, b, 3);
            let n = t.expert_response.len();
            let answer_len = n - 3 * 3 - 2;
            let idx = 3 * 3 + 1 + pick % answer_len;
            let mut r = t.expert_response.clone();
            r[idx] = (r[idx] + delta) % 10;
            proptest::prop_assert_eq!(verify(&t, &r), Reward::Incorrect);
        }
    }
}
