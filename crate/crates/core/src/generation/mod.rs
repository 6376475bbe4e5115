//! Per-level generators and discriminators, adversarial training, greedy
//! hierarchical decoding, copyediting and text emission.

mod adversarial;
mod copyedit;
mod decode;
mod emit;
mod noise;

pub use adversarial::{
    adversarial_step, cc_as_discriminator, discriminate, discriminator_logits, discriminator_loss,
    frechet_style_distance, free_run, generate_vector, generator_loss, generator_only_step,
    uses_answers, AdversarialLosses,
};
pub use copyedit::{copyedit_pass, mlm_reconstruction, EditRecord};
pub use decode::{greedy_token, hierarchical_decode, Decoder, GenNode, GeneratedDvt};
pub use emit::{emit_text, sentence_ids, EmittedText};
pub use noise::{NoiseStats, NOISE_DECAY, SIGMA_FLOOR};
