use budgeted_attention::checkpoint::Checkpoint;
use budgeted_attention::data::{id_to_word, load_text_csv, marked_dataset, read_jsonl, word_to_id, write_jsonl, CsvSplits, MarkedConfig, PAD, UNK};
use budgeted_attention::model::{EncoderModel, ModelConfig};

const CORPUS: &str = "\
label,text
1,\"Great film, great cast!\"
0,dull and slow
1,great fun
0,slow slow plot
1,a great ride
0,Dull.
";

#[test]
fn csv_loader_builds_a_frequency_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.csv");
    std::fs::write(&path, CORPUS).unwrap();
    let test_path = dir.path().join("test.csv");
    std::fs::write(&test_path, "1,great unseen words\n").unwrap();
    let splits = CsvSplits {
        val_size: 2,
        test_path: Some(test_path),
        seed: 3,
    };
    let d = load_text_csv(&path, 6, 4, &splits).unwrap();
    assert_eq!((d.train.len(), d.val.len(), d.test.len()), (4, 2, 1));
    assert_eq!(d.num_classes, 2);
    assert_eq!(&d.vocab[..2], ["<pad>", "<unk>"]);
    assert_eq!(d.vocab.len(), 6);
    assert!(d.train.iter().chain(&d.val).all(|e| e.tokens.len() == 4));
    // Unknown words map to UNK and short rows are padded.
    let great = word_to_id(&d, "great");
    assert_ne!(great, UNK);
    assert_eq!(id_to_word(&d, great), Some("great"));
    assert_eq!(d.test[0].tokens, vec![great, UNK, UNK, PAD]);

    // The same seed gives the same split.
    assert_eq!(load_text_csv(&path, 6, 4, &splits).unwrap(), d);

    let fixture = dir.path().join("d.jsonl");
    write_jsonl(&d, &fixture).unwrap();
    assert_eq!(read_jsonl(&fixture).unwrap(), d);
}

#[test]
fn csv_loader_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.csv");
    std::fs::write(&path, "1,ok\nbad,label\n0,fine\n").unwrap();
    let splits = CsvSplits {
        val_size: 1,
        test_path: None,
        seed: 0,
    };
    assert!(load_text_csv(&path, 10, 4, &splits).is_err());
    std::fs::write(&path, "1,a\n0,b\n").unwrap();
    let too_many = CsvSplits { val_size: 2, ..splits.clone() };
    assert!(load_text_csv(&path, 10, 4, &too_many).is_err());
    assert!(load_text_csv(&dir.path().join("missing.csv"), 10, 4, &splits).is_err());
}

#[test]
fn marked_fixture_and_checkpoint_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mc = MarkedConfig {
        seq_len: 8,
        n_values: 3,
        train_size: 20,
        val_size: 10,
        test_size: 10,
    };
    let d = marked_dataset(4, &mc).unwrap();
    write_jsonl(&d, &dir.path().join("m.jsonl")).unwrap();
    assert_eq!(read_jsonl(&dir.path().join("m.jsonl")).unwrap(), d);

    let cfg = ModelConfig {
        vocab_size: d.vocab_size,
        seq_len: 8,
        hidden: 8,
        layers: 2,
        heads: 2,
        ffn_dim: 8,
        num_classes: 2,
        dropout: 0.0,
    };
    let mut model = EncoderModel::new(cfg, 3).unwrap();
    model.init_gates(4).unwrap();
    let mut ck = Checkpoint {
        model,
        train: None,
        best_val_accuracy: 0.5,
        epoch: 3,
        meta: Default::default(),
    };
    ck.meta.insert("seed".into(), "3".into());
    let path = dir.path().join("nested/m.ckpt");
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);
}
