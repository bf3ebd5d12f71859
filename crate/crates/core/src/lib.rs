pub mod corpus;
pub mod grounding;
pub mod serializer;
pub mod tokenizer;
pub mod model;
pub mod decoder;
pub mod synth;
pub mod evaluator;
pub mod teaching;
