use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use shapdistill::evaluation::{synth_generate, SyntheticTeacherConfig};
use shapdistill::schema::{write_matrix, write_schema};
use shapdistill_ffi::*;

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = sd_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn scalar_functions() {
    assert_eq!(sd_sigmoid(0.0), 0.5);
    assert!((sd_contribution_probability(0.0, 3f64.ln()) - 0.25).abs() < 1e-15);

    let mut mid = 0.0;
    assert_eq!(
        unsafe { sd_assign_interval(0.75, 0.5, false, &mut mid) },
        SdStatus::Ok
    );
    assert_eq!(mid, 1.0);
    assert_eq!(
        unsafe { sd_assign_interval(2.5, 0.5, true, &mut mid) },
        SdStatus::InvalidInput
    );
    assert!(last_error().contains("whole"));

    let c = [0.1, -0.05, 0.0];
    let w = [1.0; 3];
    let mut p = 0.0;
    assert_eq!(
        unsafe { sd_infer_probability(c.as_ptr(), w.as_ptr(), 3, &mut p) },
        SdStatus::Ok
    );
    assert!((p - 0.55).abs() < 1e-15);
    assert!(sd_last_error().is_null());

    let mut r = SdReward::default();
    assert_eq!(unsafe { sd_compute_reward(0.8, 0.6, &mut r) }, SdStatus::Ok);
    assert!((r.score - 4.0).abs() < 1e-12);
    assert_eq!(r.guidance, SdGuidance::Under as i32);
    assert_eq!(unsafe { sd_compute_reward(0.8, 0.3, &mut r) }, SdStatus::Ok);
    assert_eq!((r.score, r.guidance), (0.0, SdGuidance::Contradicts as i32));
}

#[test]
fn null_and_bad_arguments() {
    assert_eq!(
        unsafe { sd_infer_probability(ptr::null(), ptr::null(), 2, ptr::null_mut()) },
        SdStatus::NullArgument
    );
    assert!(last_error().contains("contributions"));
    let mut h = ptr::null_mut();
    assert_eq!(
        unsafe { sd_acpb_read(ptr::null(), &mut h) },
        SdStatus::NullArgument
    );
    let bad = [0x66u8, 0xff, 0x00];
    assert_eq!(
        unsafe { sd_acpb_read(bad.as_ptr().cast(), &mut h) },
        SdStatus::InvalidUtf8
    );
    let missing = CString::new("/nonexistent/acpb.json").unwrap();
    assert_eq!(
        unsafe { sd_acpb_read(missing.as_ptr(), &mut h) },
        SdStatus::Io
    );
    assert!(h.is_null());
    unsafe {
        sd_acpb_free(ptr::null_mut());
        sd_store_free(ptr::null_mut());
        assert_eq!(sd_store_len(ptr::null()), 0);
    }
}

#[test]
fn pipeline_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let matrix = synth_generate(&SyntheticTeacherConfig::default(), 120).unwrap();
    let (sp, mp) = (dir.path().join("schema.json"), dir.path().join("m.csv"));
    write_schema(&sp, &matrix.schema).unwrap();
    write_matrix(&mp, &matrix).unwrap();

    unsafe {
        let mut acpb = ptr::null_mut();
        assert_eq!(
            sd_acpb_extract(cstr(&sp).as_ptr(), cstr(&mp).as_ptr(), 0.5, &mut acpb),
            SdStatus::Ok
        );
        assert_eq!(sd_acpb_feature_count(acpb), 15);
        let ap = dir.path().join("a.json");
        assert_eq!(sd_acpb_write(acpb, cstr(&ap).as_ptr()), SdStatus::Ok);

        let mut store = ptr::null_mut();
        let mut summary = SdDistillSummary::default();
        assert_eq!(
            sd_distill_stub(
                acpb,
                cstr(&mp).as_ptr(),
                0.7,
                0.05,
                0,
                &mut store,
                &mut summary
            ),
            SdStatus::Ok
        );
        assert_eq!(summary.total, 120);
        assert_eq!(summary.stored, sd_store_len(store));

        let kp = dir.path().join("kb.sdkb");
        assert_eq!(sd_store_persist(store, cstr(&kp).as_ptr()), SdStatus::Ok);
        let mut reopened = ptr::null_mut();
        assert_eq!(
            sd_store_open(cstr(&kp).as_ptr(), &mut reopened),
            SdStatus::Ok
        );
        assert_eq!(sd_store_len(reopened), sd_store_len(store));

        let row = &matrix.rows[7];
        let mut pred = SdPrediction::default();
        assert_eq!(
            sd_predict_stub(
                acpb,
                reopened,
                row.values.as_ptr(),
                row.values.len(),
                3,
                0.7,
                &mut pred
            ),
            SdStatus::Ok
        );
        assert_eq!(pred.healthy_votes + pred.unhealthy_votes, 3);
        assert_eq!(pred.tier, SdTier::Intersection as i32);
        assert_eq!(pred.classification, row.label.unwrap().code());

        assert_eq!(
            sd_predict_stub(
                acpb,
                reopened,
                row.values.as_ptr(),
                row.values.len(),
                2,
                0.7,
                &mut pred
            ),
            SdStatus::InvalidInput
        );
        assert_eq!(
            sd_predict_stub(acpb, reopened, row.values.as_ptr(), 3, 3, 0.7, &mut pred),
            SdStatus::InvalidInput
        );

        let mut bytes = std::fs::read(&kp).unwrap();
        let last = bytes.len() - 2;
        bytes[last] ^= 0x01;
        std::fs::write(&kp, bytes).unwrap();
        let mut corrupt = ptr::null_mut();
        assert_eq!(
            sd_store_open(cstr(&kp).as_ptr(), &mut corrupt),
            SdStatus::Store
        );
        assert!(last_error().contains("checksum"));

        sd_store_free(reopened);
        sd_store_free(store);
        sd_acpb_free(acpb);
    }
}

#[test]
fn header_compiles_as_c() {
    let dir = tempfile::tempdir().unwrap();
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/shapdistill.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in [
        "sd_last_error",
        "sd_compute_reward",
        "sd_acpb_extract",
        "sd_distill_stub",
        "sd_predict_stub",
        "sd_store_free",
    ] {
        assert!(text.contains(f), "header lacks {f}");
    }
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"shapdistill.h\"\nint main(void) { SdReward r; return sd_compute_reward(0.8, 0.6, &r) == SD_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(cc)
        .arg("-fsyntax-only")
        .arg("-std=c99")
        .arg("-I")
        .arg(header.parent().unwrap())
        .arg(&src)
        .status()
        .expect("a C compiler is needed to check the header");
    assert!(status.success());
}
