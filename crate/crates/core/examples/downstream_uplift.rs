//! Runs the whole pipeline in a temp directory and sweeps the classifier.

use tripvec::corpus::load_sessions;
use tripvec::eval::{feature_rows, format_comparison, sweep_downstream, Encoder, FeatureSet, DEFAULT_SWEEP_GRID};
use tripvec::pipeline::*;
use tripvec::skipgram::KeyedVectors;
use tripvec::traveler::{session_prefixes, ModelKind, TravelerModel};

fn main() -> tripvec::Result<()> {
    let dir = std::env::temp_dir().join("tripvec-downstream");
    std::fs::create_dir_all(&dir).map_err(|e| tripvec::Error::io(&dir, e))?;
    let mut config = PipelineConfig::default();
    config.paths.out_dir = dir.clone();
    config.eval.settings = ["handcrafted", "average", "dan"].map(String::from).to_vec();
    cmd_pipeline(&config)?;
    print!("{}", std::fs::read_to_string(config.out(COMPARISON_FILE)).map_err(|e| tripvec::Error::io(&dir, e))?);

    let vectors = KeyedVectors::load_text(config.out(EMBEDDINGS_TEXT_FILE))?;
    let train = session_prefixes(&load_sessions(config.out(TRAIN_SESSIONS_FILE))?, &vectors);
    let test = session_prefixes(&load_sessions(config.out(TEST_SESSIONS_FILE))?, &vectors);
    let file = tripvec::neural::ModelFile::load(config.out(&traveler_model_file(ModelKind::Dan)))?;
    let model = TravelerModel::from_model_file(&file)?;
    let encoder = Encoder {
        model: &model,
        vectors: &vectors,
        max_prefix: config.traveler.max_prefix,
    };
    let setting: FeatureSet = "dan".parse()?;
    let train_rows = feature_rows(&train, setting, Some(encoder), 1)?;
    let test_rows = feature_rows(&test, setting, Some(encoder), 2)?;
    let (best, all) = sweep_downstream(&train_rows, &test_rows, setting, &config.eval.classifier, &DEFAULT_SWEEP_GRID)?;
    for r in &all {
        println!("lr {} epochs {}: auc {:.4} f1 {:.4}", r.provenance["learning_rate"], r.provenance["epochs"], r.auc, r.f1);
    }
    println!("best:\n{}", format_comparison(&[best]));
    Ok(())
}
