//! Comparison methods: an unconditioned image encoder, text-label subspace
//! projection, and caption-then-embed.

mod capemb;
mod indirect;
mod labels;
mod select;
mod text;
mod vision;

pub use capemb::{capemb_embed, BackendCaptioner, Captioner};
pub use indirect::{
    fit_indirect_subspace, fit_subspace_from_vectors, indirect_project, render_label_prompt, ComponentRule,
    SubspaceModel, LABEL_PROMPT_TEMPLATE,
};
pub use labels::{
    generate_condition_labels, label_count_sweep, label_generation_prompt, parse_label_response,
    FixtureLabelClient, LabelClient, LabelRequest, LabelSet, LABEL_SWEEP_COUNTS,
};
pub use select::{dev_test_split, select_label_set};
pub use text::{HashTextEmbedder, TextEmbedder};
pub use vision::{global_image_embed, ToyVisionEncoder, VisionEncoder};
