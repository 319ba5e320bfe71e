use ndarray::{Array1, Array2};
use smt::config::ExperimentConfig;
use smt::dataset::{extract_patches, Split};
use smt::evaluation::{knn_accuracy, KnnConfig};
use smt::pipeline::{load_split, PipelineRunner};
use smt::preprocess::l2_normalize;
use smt::representation::{average_pool_normalize, map_grid_codes, ProjectionMap};
use smt::sparse::{encode_rows_f32, preprocess_grid};

fn main() {
    let text = std::fs::read_to_string("/tmp/mnist-tiny.cfg").unwrap();
    let cfg = ExperimentConfig::from_config_text(&text).unwrap();
    let mut runner = PipelineRunner::new(cfg.clone(), "/tmp/mnist-tiny").unwrap();
    let chain = runner.chain().unwrap();
    let whitening = runner.whitening_stage(&chain, false).unwrap();
    let dictionary = runner.dictionary_stage(&chain, false, &whitening).unwrap();
    let stats = runner.stats_stage(&chain, false, &whitening, &dictionary).unwrap();
    let embedding = runner.smt_stage(&chain, false, None).unwrap();

    // V diagonal concentration
    let v = stats.v_matrix().unwrap();
    let mut diag: Vec<(usize, f64)> = (0..v.nrows()).map(|i| (i, v[[i, i]])).collect();
    diag.sort_by(|a, b| b.1.total_cmp(&a.1));
    let total: f64 = diag.iter().map(|d| d.1).sum();
    println!("top-5 V diagonal mass: {:?}", &diag[..5]);
    println!("index0 share: {:.4}", v[[0, 0]] / total);

    // zero-patch fraction on 200 training images
    let train = load_split(&cfg, Split::Train).unwrap();
    let mut zero = 0usize;
    let mut all = 0usize;
    for img in train.images.iter().take(200) {
        let grid = extract_patches(img, 6).unwrap();
        let unit = preprocess_grid(&grid, &whitening, 3).unwrap();
        for r in unit.rows() {
            all += 1;
            if r.dot(&r) == 0.0 {
                zero += 1;
            }
        }
    }
    println!("zero-patch fraction: {:.4}", zero as f64 / all as f64);

    // projection column norms
    let p = &embedding.projection;
    let norms: Vec<f64> = (0..8).map(|j| p.column(j).dot(&p.column(j)).sqrt()).collect();
    println!("first 8 projection column norms: {norms:?}");
    println!("eigenvalues: {:?}", &embedding.eigenvalues[..8.min(embedding.eigenvalues.len())]);

    // accuracy with zero patches excluded from pooling
    let pmap = ProjectionMap::new(&embedding);
    let dict_f32 = dictionary.elements_f32();
    let embed_skip_zero = |images: &[smt::dataset::Image]| -> Array2<f32> {
        let mut out = Array2::<f32>::zeros((images.len(), embedding.d_emb()));
        for (idx, img) in images.iter().enumerate() {
            let grid = extract_patches(img, 6).unwrap();
            let unit = preprocess_grid(&grid, &whitening, 3).unwrap();
            let unit_f32 = unit.mapv(|x| x as f32);
            let codes = encode_rows_f32(&unit_f32, &dict_f32, cfg.pipeline.encoder);
            let vectors = map_grid_codes(&codes, &pmap);
            let mut acc = Array1::<f64>::zeros(embedding.d_emb());
            let mut n = 0.0;
            for (r, row) in vectors.rows().into_iter().enumerate() {
                let u = unit.row(r);
                if u.dot(&u) > 0.0 {
                    acc += &row;
                    n += 1.0;
                }
            }
            if n > 0.0 {
                acc /= n;
            }
            let z = l2_normalize(acc.view());
            for (d, s) in out.row_mut(idx).iter_mut().zip(z.iter()) {
                *d = *s as f32;
            }
        }
        out
    };
    let test = load_split(&cfg, Split::Test).unwrap();
    let n_train = 20000;
    let tr = embed_skip_zero(&train.images[..n_train]);
    let te = embed_skip_zero(&test.images[..2000]);
    let acc = knn_accuracy(
        tr.view(), &train.labels[..n_train], te.view(), &test.labels[..2000],
        &KnnConfig { k: 10, temperature: 0.07 },
    ).unwrap();
    println!("skip-zero pooling accuracy (20k train, 2k test): {acc:.4}");

    // baseline comparison: standard path on the same subset
    let pipeline = smt::representation::FittedPipeline::assemble(
        cfg.pipeline.clone(), whitening.clone(), dictionary.clone(), embedding.clone(),
    ).unwrap();
    let std_embed = |images: &[smt::dataset::Image]| -> Array2<f32> {
        let mut out = Array2::<f32>::zeros((images.len(), embedding.d_emb()));
        for (idx, img) in images.iter().enumerate() {
            let z = pipeline.embed_image(img).unwrap();
            for (d, s) in out.row_mut(idx).iter_mut().zip(&z.data) {
                *d = *s;
            }
        }
        out
    };
    let tr2 = std_embed(&train.images[..n_train]);
    let te2 = std_embed(&test.images[..2000]);
    let acc2 = knn_accuracy(
        tr2.view(), &train.labels[..n_train], te2.view(), &test.labels[..2000],
        &KnnConfig { k: 10, temperature: 0.07 },
    ).unwrap();
    println!("standard pooling accuracy (same subset): {acc2:.4}");
    let _ = average_pool_normalize; // keep import
}
