use std::fs;
use std::path::PathBuf;

use sparsepanel::panel::{PanelMatrix, Sector};
use sparsepanel::wb_client::{
    cache_file_name, IndicatorRequest, ReplayTransport, WbClient, WbConfig, WbError, DEFAULT_BASE_URL,
};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/wb")
}

fn countries() -> Vec<String> {
    ["KEN", "NGA", "ZAF"].map(String::from).to_vec()
}

fn online(cache: &std::path::Path) -> WbClient<ReplayTransport> {
    WbClient::new(
        ReplayTransport::new(fixtures()),
        WbConfig { cache_dir: cache.to_path_buf(), ..WbConfig::default() },
    )
}

fn expected() -> PanelMatrix {
    PanelMatrix::read_wide_csv(fs::File::open(fixtures().join("expected_panel.csv")).unwrap()).unwrap()
}

#[test]
fn three_countries_four_indicators_make_a_12_by_30_panel() {
    let cache = tempfile::tempdir().unwrap();
    let panel = online(cache.path()).fetch_panel(&countries(), 1991, 2020).unwrap();
    let want = expected();
    assert_eq!((panel.n_rows(), panel.n_cols()), (12, 30));
    assert_eq!(panel.years(), want.years());
    for (i, e) in want.entities().iter().enumerate() {
        let r = panel.row_of(e).unwrap_or_else(|| panic!("missing row {e}"));
        for j in 0..want.n_cols() {
            assert_eq!(panel.get(r, j), want.get(i, j), "{e} {}", want.years()[j]);
        }
    }
    // exactly the null cells are missing
    assert_eq!(12 * 30 - panel.observed_count(), 8);
}

#[test]
fn offline_replay_matches_online_parse_byte_for_byte() {
    let cache = tempfile::tempdir().unwrap();
    let live = online(cache.path());
    let a = live.fetch_panel(&countries(), 1991, 2020).unwrap();
    assert_eq!(live.transport().requests(), 4);

    let offline = WbClient::new(
        ReplayTransport::new("/nonexistent"),
        WbConfig { cache_dir: cache.path().to_path_buf(), offline: true, ..WbConfig::default() },
    );
    let b = offline.fetch_panel(&countries(), 1991, 2020).unwrap();
    assert_eq!(offline.transport().requests(), 0);
    assert_eq!(a, b);
    let (mut wa, mut wb) = (Vec::new(), Vec::new());
    a.write_wide_csv(&mut wa).unwrap();
    b.write_wide_csv(&mut wb).unwrap();
    assert_eq!(wa, wb);

    // cached pages are the recorded bytes, unchanged
    for entry in fs::read_dir(cache.path()).unwrap() {
        let entry = entry.unwrap();
        let recorded = fs::read(fixtures().join(entry.file_name())).unwrap();
        assert_eq!(fs::read(entry.path()).unwrap(), recorded);
    }
}

#[test]
fn repeated_fetch_is_served_from_cache() {
    let cache = tempfile::tempdir().unwrap();
    let c = online(cache.path());
    c.fetch_panel(&countries(), 1991, 2020).unwrap();
    let before = c.transport().requests();
    c.fetch_panel(&countries(), 1991, 2020).unwrap();
    assert_eq!(c.transport().requests(), before);
}

#[test]
fn pagination_collects_all_2037_records() {
    let cache = tempfile::tempdir().unwrap();
    let codes: Vec<String> = fs::read_to_string(fixtures().join("paged_countries.txt"))
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    let req = IndicatorRequest {
        countries: codes,
        indicator: "TEST.PAGED".into(),
        sector: Sector::Gdp,
        year_start: 2000,
        year_end: 2020,
    };
    let c = online(cache.path());
    let recs = c.fetch_indicator(&req).unwrap();
    assert_eq!(recs.len(), 2037);
    assert_eq!(c.transport().requests(), 3);
    let nulls = recs.iter().filter(|r| !r.present).count();
    // the fixture nulls every row whose (country index + year) is divisible by 11
    let expected_nulls = (0..97).flat_map(|i| (2000..=2020).map(move |y| (i + y) % 11 == 0)).filter(|&b| b).count();
    assert_eq!(nulls, expected_nulls);
    for page in 1..=3 {
        assert!(cache.path().join(cache_file_name(&req.url(DEFAULT_BASE_URL, page))).exists());
    }
}

#[test]
fn unknown_country_is_surfaced() {
    let cache = tempfile::tempdir().unwrap();
    let req = IndicatorRequest {
        countries: vec!["XXX".into()],
        indicator: WbConfig::default().indicators.gdp,
        sector: Sector::Gdp,
        year_start: 1991,
        year_end: 2020,
    };
    let err = online(cache.path()).fetch_indicator(&req).unwrap_err();
    match err {
        WbError::ApiShape { reason, .. } => assert!(reason.contains("Invalid value")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn unrecorded_request_is_an_http_error() {
    let cache = tempfile::tempdir().unwrap();
    let err = online(cache.path()).fetch_panel(&countries(), 1990, 2020).unwrap_err();
    assert!(matches!(err, WbError::Http { status: 404, .. }), "{err:?}");
}
