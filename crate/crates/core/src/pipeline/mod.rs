//! Training, persistence, streaming detection, evaluation and benchmarking.

pub mod bench;
pub mod bundle;
pub mod config;
pub mod detect;
pub mod fixture;
pub mod io;
pub mod train;

pub use bench::{bench, BenchReport};
pub use bundle::ModelBundle;
pub use config::{GaussianConfig, RunConfig};
pub use detect::{detect_stream, detect_video, Detector, FrameRecord, FrameResult, StageTimes, StreamSummary};
pub use fixture::{make_fixture, AnomalyKind, Fixture, FixtureSpec, InjectedAnomaly, Video};
pub use io::{evaluate, load_videos, DetectionHeader, DetectionWriter, FrameSource};
pub use train::{extract_features, train_pipeline, FeatureSet, TrainReport};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::{Error, FormatError};
    use crate::net::{NetworkSpec, ReferenceDepth};
    use crate::preproc::Frame;

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.autoencoder.hidden = 8;
        cfg.autoencoder.epochs = 2;
        cfg.autoencoder.batch_size = 64;
        cfg.seed = 11;
        cfg
    }

    fn tiny_fixture() -> Fixture {
        let spec = FixtureSpec {
            height: 72,
            width: 96,
            train_videos: 1,
            heldout_videos: 0,
            test_videos: 1,
            frames_per_video: 14,
            anomaly_start: 7,
            anomaly_frames: 5,
            ..FixtureSpec::default()
        };
        make_fixture(5, &spec).unwrap()
    }

    fn trained() -> (ModelBundle, Fixture) {
        let fx = tiny_fixture();
        let net = NetworkSpec::reference(ReferenceDepth::C2, 1);
        let videos = fx.train.iter().map(|v| v.frames.clone()).collect();
        let (bundle, report) = train_pipeline(&tiny_config(), &net, videos).unwrap();
        assert_eq!(report.feature_dim, 256);
        assert_eq!(report.encoded_dim, 8);
        (bundle, fx)
    }

    #[test]
    fn train_save_load_detect() {
        let (bundle, fx) = trained();
        assert_eq!(bundle.tap_layer(), "C2");
        assert_eq!(bundle.cascade.g1.dim(), 256);
        assert_eq!(bundle.cascade.g2.dim(), 8);

        let bytes = bundle.to_bytes().unwrap();
        let loaded = ModelBundle::from_bytes(&bytes).unwrap();
        assert_eq!(loaded, bundle);
        assert_eq!(loaded.to_bytes().unwrap(), bytes);

        let frames = fx.test[0].frames.clone();
        let a = detect_video(&bundle, frames.clone()).unwrap();
        let b = detect_video(&loaded, frames).unwrap();
        assert_eq!(a, b);
        for r in &a[..5] {
            assert!(r.warmup);
            assert_eq!(r.score, 0.0);
            assert!(!r.mask.any());
        }
        assert!(a[5..].iter().all(|r| !r.warmup && r.cell_scores.len() == r.rows * r.cols));
    }

    #[test]
    fn training_is_deterministic() {
        let (a, _) = trained();
        let (b, _) = trained();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    }

    #[test]
    fn identical_frames_fail_calibration() {
        // Unpadded C1 on uniform frames gives the same vector in every cell.
        let net = NetworkSpec::reference(ReferenceDepth::C2, 1);
        let frames = vec![Frame::filled(72, 96, 0.3); 8];
        let cfg = RunConfig { tap: "C1".into(), ..tiny_config() };
        let err = train_pipeline(&cfg, &net, vec![frames]).unwrap_err();
        match err {
            Error::Stage { stage, source } => {
                assert_eq!(stage, "calibrate");
                assert!(matches!(*source, Error::Degenerate(_)), "{source}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn too_few_frames_name_the_stage() {
        let net = NetworkSpec::reference(ReferenceDepth::C2, 1);
        let err = train_pipeline(&tiny_config(), &net, vec![vec![Frame::filled(72, 96, 0.3); 5]]).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: "extract", .. }), "{err}");
        let cfg = RunConfig { tap: "C9".into(), ..tiny_config() };
        let err = train_pipeline(&cfg, &net, vec![]).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: "config", .. }), "{err}");
    }

    #[test]
    fn corrupt_bundles_report_codes() {
        let (bundle, _) = trained();
        let bytes = bundle.to_bytes().unwrap();
        let code = |b: &[u8]| ModelBundle::from_bytes(b).unwrap_err().format_error().unwrap().code();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(code(&bad), "E_MAGIC");
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert_eq!(code(&bad), "E_VERSION");
        assert_eq!(code(&bytes[..bytes.len() / 2]), "E_TRUNCATED");
        for pos in [20, bytes.len() / 2, bytes.len() - 10] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x40;
            assert_eq!(code(&bad), "E_CHECKSUM", "flip at {pos}");
        }
        let err = ModelBundle::from_bytes(&bytes[..bytes.len() / 2]).unwrap_err();
        assert!(matches!(err.format_error(), Some(FormatError::Truncated { what }) if what.contains("section")), "{err}");
    }

    #[test]
    fn stream_skips_bad_frames_unless_strict() {
        let (bundle, fx) = trained();
        let items = || -> Vec<crate::Result<Frame>> {
            let mut v: Vec<_> = fx.test[0].frames.iter().cloned().map(Ok).collect();
            v[8] = Err(Error::Decode { path: "x.pgm".into(), reason: "bad".into() });
            v
        };
        let mut seen = Vec::new();
        let summary = detect_stream(&bundle, items(), false, |r| {
            seen.push(r.frame_index);
            Ok(())
        })
        .unwrap();
        assert_eq!(summary.skipped, vec![8]);
        assert_eq!(seen.len(), items().len() - 1);
        assert!(!seen.contains(&8));
        assert!(detect_stream(&bundle, items(), true, |_| Ok(())).is_err());
    }

    #[test]
    fn bench_stages_add_up() {
        let (bundle, fx) = trained();
        let report = bench(&bundle, fx.test[0].frames.iter().cloned().map(Ok)).unwrap();
        assert_eq!(report.frames, 9);
        assert_eq!(report.warmup_frames, 5);
        assert!((report.fps - 1e3 / report.total_ms).abs() < 1e-9);
        assert!(report.stage_sum_ms() <= report.total_ms * 1.0001);
        assert!(report.to_text().contains("Representation"));
    }
}
