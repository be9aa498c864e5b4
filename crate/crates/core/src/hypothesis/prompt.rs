//! Prompt templates. Only the task, modality, K, text-source and sentence list
//! slots are ever substituted; nothing else about the dataset reaches the LLM.

use super::HypothesisError;

const HYPOTHESIS_TEMPLATE: &str = "\
Context: {task} classification from {modality} using a deep neural network.

Analysis Post-Training: On a validation set:
a. Get the difference between the image embeddings of correct and incorrectly classified samples to estimate the features present in the correctly classified samples but missing in the misclassified samples.
b. Retrieve the top {k} sentences from the {source} that match closely to the embedding difference in step a.
c. The sentence list is given below:

TopK Sentence List:
{sentences}

These sentences represent the features present in the correctly classified samples but missing in the misclassified samples.

Task: Consider the consistent attributes present in the descriptions of correctly classified and misclassified samples regarding {task}. Formulate hypotheses based on these attributes. Attributes include all concepts (e.g., explicit or implicit anatomies, observations, symptoms of change related to the disease, concepts leading to potential bias in medical images, or visual cues in natural images) in the sentences. Assess how these characteristics might influence the classifier's performance.

Your response should only contain the list of top hypotheses, formatted as follows:
hypothesis_dict = {
    'H1': 'The classifier is making mistake as it is biased toward <attribute>',
    'H2': 'The classifier is making mistake as it is biased toward <attribute>',
    'H3': 'The classifier is making mistake as it is biased toward <attribute>',
    ...
}

To effectively test Hypothesis 1 (H1) using the CLIP language encoder, create prompts explicitly validating H1. These prompts will help generate text embeddings that capture the essence of the hypothesis, which can be compared with the image embeddings from the dataset. The goal is to verify alignment with or violation of H1. Prompts must focus only on the {task}. Each hypothesis must have five prompts, formatted as:
prompt_dict = {
    'H1_<attribute>': [List of prompts],
    'H2_<attribute>': [List of prompts],
    ...
}

Final response format strictly:
hypothesis_dict
prompt_dict
";

const ANONYMIZATION_NOTE: &str =
    "\nIgnore '___' as they are due to anonymization. We focus only on positive {task} patients.\n";

const METADATA_TEMPLATE: &str = "\
Context: {task} classification using a deep neural network.

Analysis post-training: On a validation set, you are provided with the metadata details for the correctly classified positive {task} patients in a Python dictionary, as follows

Metadata Dictionary:
{records}

Task: Consider the consistent attributes present in the dictionary regarding the positive {task} patients. Formulate hypotheses based on these attributes. Assess how these characteristics might be influencing the classifier's performance. Your response should contain only the list of top hypothesis, nothing else. For the response, you should be the following python dictionary template, no extra sentence:
hypothesis_dict = {
    'H1': 'The classifier is making mistake as it is biased toward <attribute>',
    'H2': 'The classifier is making mistake as it is biased toward <attribute>',
    'H3': 'The classifier is making mistake as it is biased toward <attribute>',
    ...
}
";

/// One metadata entry, keys in display order, values rendered verbatim.
pub type MetadataRecord = Vec<(String, String)>;

/// Fills `{name}` slots of `template`. Slot markers are only recognized in the
/// template itself, so substituted values are never re-expanded.
fn render(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let after = &rest[start + 1..];
        let hit = after
            .find('}')
            .map(|end| &after[..end])
            .and_then(|name| slots.iter().find(|(k, _)| *k == name).map(|(k, v)| (k.len(), *v)));
        match hit {
            Some((len, value)) => {
                out.push_str(value);
                rest = &after[len + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

pub fn build_prompt(
    task: &str,
    modality: &str,
    sentences: &[String],
    k: usize,
    medical: bool,
) -> Result<String, HypothesisError> {
    if sentences.is_empty() {
        return Err(HypothesisError::EmptySentences);
    }
    let list = sentences
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {}", i + 1, s.trim()))
        .collect::<Vec<_>>()
        .join("\n");
    let k = k.to_string();
    let source = if medical { "radiology reports" } else { "captions" };
    let slots = [
        ("task", task),
        ("modality", modality),
        ("k", k.as_str()),
        ("source", source),
        ("sentences", list.as_str()),
    ];
    let mut prompt = render(HYPOTHESIS_TEMPLATE, &slots);
    if medical {
        prompt.push_str(&render(ANONYMIZATION_NOTE, &slots));
    }
    Ok(prompt)
}

pub fn build_metadata_prompt(task: &str, records: &[MetadataRecord]) -> Result<String, HypothesisError> {
    if records.is_empty() {
        return Err(HypothesisError::EmptyRecords);
    }
    let rendered = records
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let body = rec.iter().map(|(k, v)| format!("{k}: {v}")).collect::<Vec<_>>().join(", ");
            format!("Patient {}: {{{body}}}", i + 1)
        })
        .collect::<Vec<_>>()
        .join("\n");
    Ok(render(METADATA_TEMPLATE, &[("task", task), ("records", rendered.as_str())]))
}
