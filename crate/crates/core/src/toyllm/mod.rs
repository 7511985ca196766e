//! Frozen toy decoder with prefix injection and its fine-tuning loop.

pub mod decoder;
pub mod model;
pub mod seqenc;

pub use decoder::{prefix_attention, prefix_attention_tape, DecoderConfig, ToyDecoder};
pub use model::{
    evaluate_finetuned, finetune_examples, finetune_step, train_finetune, Example, FineTuneConfig, FineTuneModel,
    FineTuneOutcome, Prediction, PromptSequence, Template,
};
pub use seqenc::{SeqEncoder, SeqItems, DEFAULT_MAX_LEN};
