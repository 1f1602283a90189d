//! LLM-written critiques attached to feedback bundles.

use std::fmt::Write as _;

use crate::gateway::{ChatMessage, Gateway, GatewayError, Role};
use crate::model::{FeedbackBundle, QuantReport};

const CRITIC_SYSTEM: &str = "You review candidate implementations of data-processing tasks. \
Be specific and brief: name concrete differences and the changes that would fix them.";

fn quant_lines(quant: &QuantReport) -> String {
    let corr = quant
        .correlation
        .map_or_else(|| "undefined".to_string(), |c| format!("{c:?}"));
    format!(
        "correlation with ground truth: {corr}\nvalue accuracy: {:?}\noverlap with ground-truth keys: {:?} ({} aligned rows)\n",
        quant.value_accuracy, quant.overlap_fraction, quant.n_aligned
    )
}

/// Asks the model to articulate how the candidate differs from the expert
/// solution, given the measured agreement of their outputs.
pub fn supervised_diff_critique(
    candidate_code: &str,
    truth_code: &str,
    quant: &QuantReport,
    gateway: &Gateway,
) -> Result<String, GatewayError> {
    let mut prompt = String::new();
    let _ = write!(
        prompt,
        "## Candidate implementation\n```\n{candidate_code}\n```\n\n\
         ## Reference implementation\n```\n{truth_code}\n```\n\n\
         ## Output agreement\n{}\n\
         List the differences between the candidate and the reference that explain the \
         agreement numbers above, and the steps that would bring the candidate in line.",
        quant_lines(quant)
    );
    gateway.chat(&gateway.request(vec![
        ChatMessage::new(Role::System, CRITIC_SYSTEM),
        ChatMessage::new(Role::User, prompt),
    ]))
}

/// Unsupervised self-critique of a failed attempt from its own feedback.
pub fn self_critique(code: &str, feedback: &FeedbackBundle, gateway: &Gateway) -> Result<String, GatewayError> {
    let prompt = format!(
        "## Attempted implementation\n```\n{code}\n```\n\n## Feedback\n{}\n\n\
         Explain what went wrong and list the steps to fix it.",
        feedback.primary_message()
    );
    gateway.chat(&gateway.request(vec![
        ChatMessage::new(Role::System, CRITIC_SYSTEM),
        ChatMessage::new(Role::User, prompt),
    ]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluators::metrics::testing::bundle;
    use crate::gateway::{GatewayMode, MockBackend, MockScript, Transcript};
    use std::sync::Arc;

    fn quant(c: Option<f64>) -> QuantReport {
        QuantReport {
            correlation: c,
            value_accuracy: 1.0,
            overlap_fraction: 1.0,
            n_aligned: 20,
        }
    }

    #[test]
    fn prompt_carries_both_codes_and_numbers() {
        let backend = Arc::new(
            MockBackend::new(MockScript::default().rule(
                r"(?s)cand_code.*ref_code.*correlation with ground truth: 1\.0",
                "identical",
            ))
            .unwrap(),
        );
        let gw = Gateway::live(backend);
        let out = supervised_diff_critique("cand_code", "ref_code", &quant(Some(1.0)), &gw).unwrap();
        assert_eq!(out, "identical");
    }

    #[test]
    fn replay_returns_stored_text_and_faults_surface() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let backend = Arc::new(MockBackend::new(MockScript::default().fallback("stored critique")).unwrap());
        let rec =
            Gateway::with_transcript(Transcript::open(&path, GatewayMode::Record).unwrap(), Some(backend)).unwrap();
        supervised_diff_critique("a", "b", &quant(None), &rec).unwrap();
        let rep = Gateway::with_transcript(Transcript::open(&path, GatewayMode::Replay).unwrap(), None).unwrap();
        assert_eq!(
            supervised_diff_critique("a", "b", &quant(None), &rep).unwrap(),
            "stored critique"
        );
        assert!(matches!(
            supervised_diff_critique("a", "c", &quant(None), &rep),
            Err(GatewayError::ReplayMiss { .. })
        ));
        let down = Gateway::live(Arc::new(MockBackend::embedder(4)));
        assert!(self_critique("x", &bundle(false, false, None), &down).is_err());
    }
}
