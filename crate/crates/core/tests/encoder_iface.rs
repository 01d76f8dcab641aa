mod common;

use sadlr::data::generate_sample;
use sadlr::encoder::{Encoded, Encoder, TokenSeq};
use sadlr::model::run_pipeline;
use sadlr::{Error, Graph, Model, ParamId, ParamStore, SadlrConfig, Tensor};

fn model(seed: u64) -> Model<f64> {
    Model::init(&SadlrConfig::desk(3), seed).unwrap()
}

fn val<'a>(store: &'a ParamStore<f64>, name: &str) -> &'a [f64] {
    store.by_name(name).unwrap().value.data()
}

fn image(seed: u64) -> Tensor<f64> {
    let mut r = common::rng(seed);
    let x = common::random(&[3, 48, 48], &mut r);
    Tensor::new(&[3, 48, 48], x.data().iter().map(|v| v.abs()).collect()).unwrap()
}

/// Block-averaged pixels repeated across channels, plus its own word table.
struct PoolingEncoder {
    channels: usize,
    table: ParamId,
}

impl Encoder<f64> for PoolingEncoder {
    fn stride(&self) -> usize {
        4
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn lang_channels(&self) -> usize {
        32
    }

    fn encode(
        &self,
        g: &mut Graph<f64>,
        store: &ParamStore<f64>,
        image: &Tensor<f64>,
        tokens: &TokenSeq,
    ) -> sadlr::Result<Encoded> {
        let (_, h, w) = image.dims3("pooling encoder")?;
        let (fh, fw) = (h / 4, w / 4);
        let feats = Tensor::from_fn(&[self.channels, fh, fw], |i| {
            let (c, y, x) = (i / (fh * fw), i / fw % fh, i % fw);
            let mut s = 0.0;
            for dy in 0..4 {
                for dx in 0..4 {
                    s += image.data()[((c % 3) * h + 4 * y + dy) * w + 4 * x + dx];
                }
            }
            s / 16.0 + c as f64 * 0.01
        })?;
        let features = g.constant(feats);
        let table = g.param(store, self.table);
        let ids: Vec<usize> = tokens.ids().iter().map(|&i| i as usize).collect();
        let words = g.embedding_lookup(table, &ids)?;
        Ok(Encoded {
            features,
            words,
            valid: tokens.valid(),
        })
    }
}

#[test]
fn any_encoder_plugs_into_the_head() {
    let m = model(1);
    let mut store = m.store.clone();
    let mut r = common::rng(2);
    let table = store
        .add("pool.embedding", common::random(&[11, 32], &mut r))
        .unwrap();
    let enc = PoolingEncoder {
        channels: 32,
        table,
    };
    let sample = generate_sample(3);
    let img = sample.image.cast();
    let mut g = Graph::new();
    let out = run_pipeline(&mut g, &store, &enc, &m.head, &img, &sample.tokens, None).unwrap();
    assert_eq!(out.head.scores.len(), 3);
    for &s in &out.head.scores {
        assert_eq!(g.shape(s), &[2, 12, 12]);
    }
    let loss = g.sum(out.head.scores[2]);
    let grads = g.backward(loss).unwrap();
    assert!(grads.param(table).unwrap().data().iter().any(|&v| v != 0.0));
    assert!(grads.param(m.head.cls_weight).is_some());

    let narrow = PoolingEncoder {
        channels: 16,
        table,
    };
    let mut g = Graph::new();
    let err = run_pipeline(&mut g, &store, &narrow, &m.head, &img, &sample.tokens, None);
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn toy_encoder_shape_contract() {
    let m = model(4);
    let sample = generate_sample(5);
    assert_eq!(Encoder::<f64>::stride(&m.encoder), 4);
    let mut g = Graph::new();
    let enc = m
        .encoder
        .encode(&mut g, &m.store, &sample.image.cast(), &sample.tokens)
        .unwrap();
    assert_eq!(g.shape(enc.features), &[32, 12, 12]);
    assert_eq!(g.shape(enc.words), &[32, 4]);
    assert_eq!(enc.valid, sample.tokens.valid());

    let mut g = Graph::new();
    let odd = g.input(Tensor::zeros(&[3, 50, 50]).unwrap());
    assert!(matches!(
        m.encoder.encode_image(&mut g, &m.store, odd),
        Err(Error::Config(_))
    ));
}

#[test]
fn word_features_are_table_rows() {
    let m = model(6);
    let table = val(&m.store, "encoder.embedding");
    let tokens = TokenSeq::padded(&[9, 2, 5], 4).unwrap();
    let mut g = Graph::new();
    let l = m.encoder.encode_tokens(&mut g, &m.store, &tokens).unwrap();
    let l = g.value(l).data();
    for (t, &id) in [9usize, 2, 5, 0].iter().enumerate() {
        for c in 0..32 {
            assert_eq!(l[c * 4 + t], table[id * 32 + c]);
        }
    }
    assert!(TokenSeq::padded(&[11], 4).is_ok());
    let mut g = Graph::new();
    let bad = TokenSeq::padded(&[11], 4).unwrap();
    assert!(matches!(
        m.encoder.encode_tokens(&mut g, &m.store, &bad),
        Err(Error::Index { .. })
    ));
}

#[test]
fn visual_features_match_conv_oracle() {
    let m = model(7);
    let img = image(8);
    let mut g = Graph::new();
    let iv = g.input(img.clone());
    let v = m.encoder.encode_image(&mut g, &m.store, iv).unwrap();
    let (x, h, w) = common::conv2d(
        img.data(),
        (3, 48, 48),
        val(&m.store, "encoder.conv1.weight"),
        val(&m.store, "encoder.conv1.bias"),
        16,
        3,
        2,
        1,
    );
    let (x, _, _) = common::conv2d(
        &common::relu(&x),
        (16, h, w),
        val(&m.store, "encoder.conv2.weight"),
        val(&m.store, "encoder.conv2.bias"),
        32,
        3,
        2,
        1,
    );
    assert!(common::close(g.value(v).data(), &common::relu(&x), 1e-12));

    // zero image with the initial zero biases
    let mut g = Graph::new();
    let zv = g.input(Tensor::zeros(&[3, 48, 48]).unwrap());
    let v = m.encoder.encode_image(&mut g, &m.store, zv).unwrap();
    assert!(g.value(v).data().iter().all(|&x| x == 0.0));
}

#[test]
fn fusion_matches_composed_oracle() {
    let mut m = model(9);
    let mut r = common::rng(10);
    for p in m.store.iter_mut() {
        p.value = common::random(p.value.shape(), &mut r);
    }
    let visual = Tensor::new(
        &[32, 2, 3],
        common::random(&[32, 2, 3], &mut r).data().to_vec(),
    )
    .unwrap();
    let words = common::random(&[32, 4], &mut r);
    let mut g = Graph::new();
    let (vv, wv) = (g.input(visual.clone()), g.input(words.clone()));
    let y = m
        .encoder
        .fuse_multimodal(&mut g, &m.store, vv, wv, 2)
        .unwrap();

    let mean: Vec<f64> = (0..32)
        .map(|c| (words.data()[c * 4] + words.data()[c * 4 + 1]) / 2.0)
        .collect();
    let s: Vec<f64> = common::matmul(val(&m.store, "encoder.lang.weight"), &mean, 32, 32, 1)
        .iter()
        .zip(val(&m.store, "encoder.lang.bias"))
        .map(|(a, b)| a + b)
        .collect();
    let mut cat = visual.data().to_vec();
    for &sc in &s {
        cat.extend(std::iter::repeat_n(sc, 6));
    }
    let (mixed, _, _) = common::conv2d(
        &cat,
        (64, 2, 3),
        val(&m.store, "encoder.fuse.weight"),
        val(&m.store, "encoder.fuse.bias"),
        32,
        1,
        1,
        0,
    );
    assert!(common::close(
        g.value(y).data(),
        &common::relu(&mixed),
        1e-12
    ));
}

fn fused(m: &Model<f64>, img: &Tensor<f64>, words: &[u16]) -> Tensor<f64> {
    let mut g = Graph::new();
    let enc = m
        .encoder
        .encode(&mut g, &m.store, img, &TokenSeq::padded(words, 4).unwrap())
        .unwrap();
    g.value(enc.features).clone()
}

#[test]
fn language_reaches_the_features() {
    let m = model(11);
    let flat = Tensor::full(&[3, 48, 48], 0.5).unwrap();
    let a = fused(&m, &flat, &[1, 4]);
    let b = fused(&m, &flat, &[3, 6]);
    assert_ne!(a, b);

    // equal valid counts: the sentence mean ignores word order
    let p = fused(&m, &flat, &[7, 2, 5]);
    let q = fused(&m, &flat, &[5, 7, 2]);
    assert!(common::close(p.data(), q.data(), 1e-12));
}

#[test]
fn silent_language_leaves_only_the_image() {
    let mut m = model(12);
    for name in [
        "encoder.embedding",
        "encoder.lang.bias",
        "encoder.fuse.bias",
    ] {
        let id = m.store.id(name).unwrap();
        let shape = m.store.get(id).value.shape().to_vec();
        m.store.get_mut(id).value = Tensor::zeros(&shape).unwrap();
    }
    let img = image(13);
    let a = fused(&m, &img, &[1, 4]);
    let b = fused(&m, &img, &[3, 6, 9]);
    assert_eq!(a, b);
}
