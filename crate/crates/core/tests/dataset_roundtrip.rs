use swincd::pipeline::data::{load_dataset, save_dataset, tile_grid};
use swincd::pipeline::raster::{read_probability, write_probability};
use swincd::pipeline::{stitch, synth_dataset, tile};

#[test]
fn saved_dataset_loads_back_identically() {
    let d = tempfile::tempdir().unwrap();
    let pairs = synth_dataset(3, 128, 8).unwrap();
    let manifest = save_dataset(d.path(), &pairs).unwrap();
    assert_eq!(load_dataset(&manifest).unwrap(), pairs);
    assert_eq!(load_dataset(d.path()).unwrap(), pairs);
}

#[test]
fn tiles_on_disk_stitch_back_to_the_scene() {
    let d = tempfile::tempdir().unwrap();
    let scene = &synth_dataset(1, 192, 2).unwrap()[0];
    let tiles = tile(scene, 64).unwrap();
    save_dataset(d.path(), &tiles).unwrap();
    let back = load_dataset(d.path()).unwrap();
    let (rows, cols) = tile_grid(192, 192, 64);
    assert_eq!(stitch(&scene.id, &back, rows, cols).unwrap(), *scene);
}

#[test]
fn probability_maps_keep_f32_precision() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("prob/x.pgm");
    let prob: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
    write_probability(&p, 3, 4, &prob).unwrap();
    let (h, w, back) = read_probability(&p).unwrap();
    assert_eq!((h, w), (3, 4));
    for (a, b) in prob.iter().zip(&back) {
        assert_eq!(*a as f32 as f64, *b);
    }
}
