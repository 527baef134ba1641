#![allow(dead_code)]

use itts_core::distill::{Student, StudentDims};
use itts_core::lm::LanguageModel;
use itts_core::tts::{Teacher, TeacherDims};

pub const VOCAB: usize = 20;

pub fn tiny_dims() -> TeacherDims {
    TeacherDims {
        word_dim: 8,
        encoder_hidden: 8,
        context_dim: 12,
        style_tokens: 4,
        decoder_hidden: 16,
        frame_dim: 4,
    }
}

/// Untrained models; enough for structural properties.
pub fn tiny_models(seed: u64) -> (Teacher, LanguageModel, Student) {
    let teacher = Teacher::new(VOCAB, tiny_dims(), seed);
    let lm = LanguageModel::new(VOCAB, 8, 12, seed + 1);
    let student = Student::new(
        VOCAB,
        StudentDims {
            table_dim: 10,
            hidden: 6,
            dense: 8,
            context_dim: 12,
        },
        seed + 2,
        seed + 3,
    );
    (teacher, lm, student)
}
