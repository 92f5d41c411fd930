//! World Bank API v2 client for sector value-added and GDP series.
//!
//! Responses are cached verbatim under `<sha256 of URL>.json`, so a warmed
//! cache replays exactly what the network returned. Network access goes
//! through the [`Transport`] trait; [`HttpTransport`] talks to the live API
//! and [`ReplayTransport`] serves recorded pages from a directory.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::panel::{to_wide_matrix, LongRecord, PanelError, PanelMatrix, Sector};

pub const DEFAULT_BASE_URL: &str = "https://api.worldbank.org/v2";
pub const PER_PAGE: usize = 1000;
/// Environment variable overriding the default cache directory.
pub const CACHE_DIR_ENV: &str = "SPARSEPANEL_CACHE_DIR";

const SNIPPET_LEN: usize = 200;

#[derive(Debug, Error)]
pub enum WbError {
    #[error("HTTP {status} from {url}: {snippet}")]
    Http { status: u16, url: String, snippet: String },
    #[error("network error for {url}: {message}")]
    Network { url: String, message: String },
    #[error("unexpected API response from {url}: {reason}")]
    ApiShape { url: String, reason: String },
    #[error("offline and no cached page for {0}")]
    CacheMiss(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("cache io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Panel(#[from] PanelError),
}

pub type Result<T> = std::result::Result<T, WbError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: Vec<u8>,
}

/// A blocking GET.
pub trait Transport: Send + Sync {
    fn get(&self, url: &str) -> Result<HttpResponse>;
}

/// Live HTTP transport, limited to at most `max_per_second` requests.
pub struct HttpTransport {
    agent: ureq::Agent,
    min_interval: Duration,
    last: Mutex<Option<Instant>>,
}

impl HttpTransport {
    pub fn new(max_per_second: u32, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        HttpTransport {
            agent,
            min_interval: Duration::from_secs(1) / max_per_second.max(1),
            last: Mutex::new(None),
        }
    }

    fn throttle(&self) {
        let mut last = self.last.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(prev) = *last {
            let next = prev + self.min_interval;
            let now = Instant::now();
            if next > now {
                thread::sleep(next - now);
            }
        }
        *last = Some(Instant::now());
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        HttpTransport::new(5, Duration::from_secs(60))
    }
}

impl Transport for HttpTransport {
    fn get(&self, url: &str) -> Result<HttpResponse> {
        self.throttle();
        let network = |e: ureq::Error| WbError::Network { url: url.to_string(), message: e.to_string() };
        let mut resp = self.agent.get(url).call().map_err(network)?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_vec().map_err(network)?;
        Ok(HttpResponse { status, body })
    }
}

/// Serves `<sha256 of URL>.json` files from a directory and counts requests.
/// Unknown URLs answer 404.
pub struct ReplayTransport {
    dir: PathBuf,
    requests: AtomicUsize,
}

impl ReplayTransport {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ReplayTransport { dir: dir.into(), requests: AtomicUsize::new(0) }
    }

    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

impl Transport for ReplayTransport {
    fn get(&self, url: &str) -> Result<HttpResponse> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        match std::fs::read(self.dir.join(cache_file_name(url))) {
            Ok(body) => Ok(HttpResponse { status: 200, body }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                Ok(HttpResponse { status: 404, body: b"no recorded response".to_vec() })
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl<T: Transport + ?Sized> Transport for &T {
    fn get(&self, url: &str) -> Result<HttpResponse> {
        (**self).get(url)
    }
}

/// Indicator codes fetched for each sector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IndicatorSet {
    pub gdp: String,
    pub agriculture: String,
    pub industry: String,
    pub services: String,
}

impl Default for IndicatorSet {
    /// GDP and sector value added, all in current US$.
    fn default() -> Self {
        IndicatorSet {
            gdp: "NY.GDP.MKTP.CD".into(),
            agriculture: "NV.AGR.TOTL.CD".into(),
            industry: "NV.IND.TOTL.CD".into(),
            services: "NV.SRV.TOTL.CD".into(),
        }
    }
}

impl IndicatorSet {
    pub fn code(&self, sector: Sector) -> &str {
        match sector {
            Sector::Gdp => &self.gdp,
            Sector::Agriculture => &self.agriculture,
            Sector::Industry => &self.industry,
            Sector::Services => &self.services,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    /// Wait before the first retry; doubled after each further failure.
    pub backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_retries: 3, backoff: Duration::from_millis(500) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WbConfig {
    pub base_url: String,
    pub cache_dir: PathBuf,
    /// Read from the cache only; a missing page is an error.
    pub offline: bool,
    pub indicators: IndicatorSet,
    pub retry: RetryPolicy,
}

impl Default for WbConfig {
    fn default() -> Self {
        WbConfig {
            base_url: DEFAULT_BASE_URL.into(),
            cache_dir: default_cache_dir(),
            offline: false,
            indicators: IndicatorSet::default(),
            retry: RetryPolicy::default(),
        }
    }
}

/// `$SPARSEPANEL_CACHE_DIR` if set, otherwise `.sparsepanel-cache`.
pub fn default_cache_dir() -> PathBuf {
    std::env::var_os(CACHE_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(".sparsepanel-cache"))
}

/// One indicator for a set of countries over an inclusive year range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorRequest {
    /// ISO3 codes.
    pub countries: Vec<String>,
    pub indicator: String,
    /// Sector the returned values are filed under.
    pub sector: Sector,
    pub year_start: i32,
    pub year_end: i32,
}

impl IndicatorRequest {
    pub fn validate(&self) -> Result<()> {
        if self.countries.is_empty() {
            return Err(WbError::InvalidRequest("no countries".into()));
        }
        if let Some(c) = self.countries.iter().find(|c| c.is_empty() || !c.chars().all(|ch| ch.is_ascii_alphanumeric())) {
            return Err(WbError::InvalidRequest(format!("bad country code `{c}`")));
        }
        if self.indicator.is_empty() || self.indicator.contains(['/', '?', '&', ' ']) {
            return Err(WbError::InvalidRequest(format!("bad indicator code `{}`", self.indicator)));
        }
        if self.year_start > self.year_end {
            return Err(WbError::InvalidRequest(format!("year range {}:{} is empty", self.year_start, self.year_end)));
        }
        Ok(())
    }

    /// URL of 1-based page `page`; the first page carries no `page` parameter.
    pub fn url(&self, base_url: &str, page: usize) -> String {
        let mut url = format!(
            "{}/country/{}/indicator/{}?format=json&per_page={PER_PAGE}&date={}:{}",
            base_url.trim_end_matches('/'),
            self.countries.join(";"),
            self.indicator,
            self.year_start,
            self.year_end
        );
        if page > 1 {
            url.push_str(&format!("&page={page}"));
        }
        url
    }
}

/// Cache file name for `url`: lowercase hex SHA-256 plus `.json`.
pub fn cache_file_name(url: &str) -> String {
    format!("{}.json", hex::encode(Sha256::digest(url.as_bytes())))
}

/// One parsed response page.
#[derive(Debug, Clone, PartialEq)]
pub struct Page {
    pub page: usize,
    pub pages: usize,
    pub total: Option<usize>,
    pub records: Vec<LongRecord>,
}

fn as_count(v: Option<&Value>) -> Option<usize> {
    match v? {
        Value::Number(n) => n.as_u64().map(|x| x as usize),
        Value::String(s) => s.parse().ok(),
        _ => None,
    }
}

/// Parses a `[metadata, rows]` page. Rows with a `null` value become
/// `present = false` records.
pub fn parse_page(url: &str, body: &[u8], sector: Sector) -> Result<Page> {
    let shape = |reason: String| WbError::ApiShape { url: url.to_string(), reason };
    let json: Value = serde_json::from_slice(body).map_err(|e| shape(format!("invalid JSON: {e}")))?;
    let arr = json.as_array().ok_or_else(|| shape("not a JSON array".into()))?;
    if arr.len() != 2 {
        // the API reports bad parameters as a one-element array with a message
        let message = arr
            .first()
            .and_then(|m| m.get("message"))
            .map(|m| m.to_string())
            .unwrap_or_default();
        return Err(shape(format!("expected a 2-element array, got {} {message}", arr.len())));
    }
    let meta = &arr[0];
    let page = as_count(meta.get("page")).ok_or_else(|| shape("metadata lacks `page`".into()))?;
    let pages = as_count(meta.get("pages")).ok_or_else(|| shape("metadata lacks `pages`".into()))?;
    let total = as_count(meta.get("total"));
    let rows: &[Value] = match &arr[1] {
        Value::Array(rows) => rows,
        Value::Null => &[],
        _ => return Err(shape("second element is not an array".into())),
    };
    let mut records = Vec::with_capacity(rows.len());
    for (k, row) in rows.iter().enumerate() {
        let country = row
            .get("countryiso3code")
            .and_then(Value::as_str)
            .filter(|s| !s.is_empty())
            .or_else(|| row.get("country").and_then(|c| c.get("id")).and_then(Value::as_str))
            .ok_or_else(|| shape(format!("row {k} has no country code")))?;
        let year: i32 = row
            .get("date")
            .and_then(Value::as_str)
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| shape(format!("row {k} has no integer `date`")))?;
        records.push(match row.get("value") {
            None | Some(Value::Null) => LongRecord::missing(country, sector, year),
            Some(v) => {
                let value = v.as_f64().ok_or_else(|| shape(format!("row {k} has a non-numeric value")))?;
                LongRecord::observed(country, sector, year, value)
            }
        });
    }
    Ok(Page { page, pages, total, records })
}

pub struct WbClient<T: Transport> {
    transport: T,
    config: WbConfig,
    /// Serialises cache writes; files are also replaced atomically.
    write_lock: Mutex<()>,
}

impl<T: Transport> WbClient<T> {
    pub fn new(transport: T, config: WbConfig) -> Self {
        WbClient { transport, config, write_lock: Mutex::new(()) }
    }

    pub fn config(&self) -> &WbConfig {
        &self.config
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    fn cache_path(&self, url: &str) -> PathBuf {
        self.config.cache_dir.join(cache_file_name(url))
    }

    fn store(&self, url: &str, body: &[u8]) -> Result<()> {
        let _guard = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
        write_atomic(&self.config.cache_dir, &self.cache_path(url), body)
    }

    fn download(&self, url: &str) -> Result<Vec<u8>> {
        let mut wait = self.config.retry.backoff;
        let mut attempt = 0;
        loop {
            let resp = self.transport.get(url)?;
            let retryable = resp.status == 429 || (500..600).contains(&resp.status);
            if resp.status == 200 {
                return Ok(resp.body);
            }
            if !retryable || attempt >= self.config.retry.max_retries {
                let text = String::from_utf8_lossy(&resp.body);
                return Err(WbError::Http {
                    status: resp.status,
                    url: url.to_string(),
                    snippet: text.chars().take(SNIPPET_LEN).collect(),
                });
            }
            thread::sleep(wait);
            wait *= 2;
            attempt += 1;
        }
    }

    /// Raw body of `url`: from the cache when present, otherwise from the
    /// network (unless offline), validated and then cached.
    fn page_body(&self, url: &str, sector: Sector) -> Result<(Vec<u8>, Page)> {
        match std::fs::read(self.cache_path(url)) {
            Ok(body) => {
                let page = parse_page(url, &body, sector)?;
                return Ok((body, page));
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        if self.config.offline {
            return Err(WbError::CacheMiss(url.to_string()));
        }
        let body = self.download(url)?;
        // only well-formed pages are cached
        let page = parse_page(url, &body, sector)?;
        self.store(url, &body)?;
        Ok((body, page))
    }

    /// All records of one indicator, following pagination to the last page.
    pub fn fetch_indicator(&self, req: &IndicatorRequest) -> Result<Vec<LongRecord>> {
        req.validate()?;
        let mut records = Vec::new();
        let mut page_no = 1;
        loop {
            let url = req.url(&self.config.base_url, page_no);
            let (_, page) = self.page_body(&url, req.sector)?;
            if page.page != page_no && page.pages > 0 {
                return Err(WbError::ApiShape { url, reason: format!("asked for page {page_no}, got {}", page.page) });
            }
            records.extend(page.records);
            if page_no >= page.pages {
                break;
            }
            page_no += 1;
        }
        Ok(records)
    }

    /// GDP and the three sector series for `countries`, merged into one
    /// panel with a row per (country, sector).
    pub fn fetch_panel(&self, countries: &[String], year_start: i32, year_end: i32) -> Result<PanelMatrix> {
        let mut records = Vec::new();
        for sector in Sector::ALL {
            let req = IndicatorRequest {
                countries: countries.to_vec(),
                indicator: self.config.indicators.code(sector).to_string(),
                sector,
                year_start,
                year_end,
            };
            records.extend(self.fetch_indicator(&req)?);
        }
        if records.is_empty() {
            return Err(WbError::ApiShape {
                url: self.config.base_url.clone(),
                reason: "no records returned for any indicator".into(),
            });
        }
        Ok(to_wide_matrix(&records)?)
    }
}

/// Writes through a temporary file in the same directory and renames it
/// into place, so readers never see a partial file.
fn write_atomic(dir: &Path, path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    /// Answers each GET from a fixed script of (status, body).
    struct Scripted {
        script: Mutex<VecDeque<(u16, String)>>,
        calls: AtomicUsize,
    }

    impl Scripted {
        fn new(script: Vec<(u16, &str)>) -> Self {
            Scripted {
                script: Mutex::new(script.into_iter().map(|(s, b)| (s, b.to_string())).collect()),
                calls: AtomicUsize::new(0),
            }
        }
    }

    impl Transport for Scripted {
        fn get(&self, _url: &str) -> Result<HttpResponse> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let (status, body) = self.script.lock().unwrap().pop_front().expect("script exhausted");
            Ok(HttpResponse { status, body: body.into_bytes() })
        }
    }

    const ONE_PAGE: &str = r#"[{"page":1,"pages":1,"per_page":1000,"total":2},
        [{"indicator":{"id":"X","value":"x"},"country":{"id":"KE","value":"Kenya"},"countryiso3code":"KEN","date":"2001","value":12.5},
         {"indicator":{"id":"X","value":"x"},"country":{"id":"KE","value":"Kenya"},"countryiso3code":"KEN","date":"2000","value":null}]]"#;

    fn req() -> IndicatorRequest {
        IndicatorRequest {
            countries: vec!["KEN".into()],
            indicator: "X".into(),
            sector: Sector::Gdp,
            year_start: 2000,
            year_end: 2001,
        }
    }

    fn client<T: Transport>(t: T, dir: &Path) -> WbClient<T> {
        WbClient::new(
            t,
            WbConfig {
                cache_dir: dir.to_path_buf(),
                retry: RetryPolicy { max_retries: 3, backoff: Duration::from_millis(1) },
                ..WbConfig::default()
            },
        )
    }

    #[test]
    fn url_layout() {
        let mut r = req();
        r.countries.push("NGA".into());
        assert_eq!(
            r.url(DEFAULT_BASE_URL, 1),
            "https://api.worldbank.org/v2/country/KEN;NGA/indicator/X?format=json&per_page=1000&date=2000:2001"
        );
        assert!(r.url(DEFAULT_BASE_URL, 3).ends_with("&date=2000:2001&page=3"));
    }

    #[test]
    fn null_value_becomes_missing_record() {
        let page = parse_page("u", ONE_PAGE.as_bytes(), Sector::Gdp).unwrap();
        assert_eq!((page.page, page.pages, page.total), (1, 1, Some(2)));
        assert_eq!(page.records[0], LongRecord::observed("KEN", Sector::Gdp, 2001, 12.5));
        assert_eq!(page.records[1], LongRecord::missing("KEN", Sector::Gdp, 2000));
    }

    #[test]
    fn string_counts_and_empty_rows_are_accepted() {
        let page = parse_page("u", br#"[{"page":"1","pages":"0","total":0},null]"#, Sector::Gdp).unwrap();
        assert_eq!((page.page, page.pages), (1, 0));
        assert!(page.records.is_empty());
    }

    #[test]
    fn api_error_message_is_a_shape_error() {
        let body = br#"[{"message":[{"id":"120","key":"Invalid value","value":"The provided parameter value is not valid"}]}]"#;
        match parse_page("u", body, Sector::Gdp) {
            Err(WbError::ApiShape { reason, .. }) => assert!(reason.contains("Invalid value"), "{reason}"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_page("u", b"{}", Sector::Gdp), Err(WbError::ApiShape { .. })));
        assert!(matches!(parse_page("u", b"not json", Sector::Gdp), Err(WbError::ApiShape { .. })));
    }

    #[test]
    fn retries_transient_failures() {
        let dir = tempfile::tempdir().unwrap();
        let c = client(Scripted::new(vec![(503, "busy"), (429, "slow down"), (200, ONE_PAGE)]), dir.path());
        assert_eq!(c.fetch_indicator(&req()).unwrap().len(), 2);
        assert_eq!(c.transport().calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn gives_up_after_three_retries() {
        let dir = tempfile::tempdir().unwrap();
        let c = client(Scripted::new(vec![(500, "a"), (502, "b"), (503, "c"), (504, "gateway timeout")]), dir.path());
        match c.fetch_indicator(&req()) {
            Err(WbError::Http { status, snippet, .. }) => {
                assert_eq!(status, 504);
                assert_eq!(snippet, "gateway timeout");
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(c.transport().calls.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let dir = tempfile::tempdir().unwrap();
        let c = client(Scripted::new(vec![(400, "bad request")]), dir.path());
        assert!(matches!(c.fetch_indicator(&req()), Err(WbError::Http { status: 400, .. })));
        assert_eq!(c.transport().calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn cache_replays_without_network() {
        let dir = tempfile::tempdir().unwrap();
        let online = client(Scripted::new(vec![(200, ONE_PAGE)]), dir.path());
        let first = online.fetch_indicator(&req()).unwrap();
        // script is now empty: a second network call would panic
        let again = online.fetch_indicator(&req()).unwrap();
        assert_eq!(first, again);
        let cached = std::fs::read(dir.path().join(cache_file_name(&req().url(DEFAULT_BASE_URL, 1)))).unwrap();
        assert_eq!(cached, ONE_PAGE.as_bytes());

        let mut offline = client(Scripted::new(vec![]), dir.path());
        offline.config.offline = true;
        assert_eq!(offline.fetch_indicator(&req()).unwrap(), first);
    }

    #[test]
    fn offline_without_cache_is_a_miss() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = client(Scripted::new(vec![]), dir.path());
        c.config.offline = true;
        assert!(matches!(c.fetch_indicator(&req()), Err(WbError::CacheMiss(_))));
    }

    #[test]
    fn malformed_pages_are_not_cached() {
        let dir = tempfile::tempdir().unwrap();
        let c = client(Scripted::new(vec![(200, "[]")]), dir.path());
        assert!(matches!(c.fetch_indicator(&req()), Err(WbError::ApiShape { .. })));
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn request_validation() {
        let mut r = req();
        r.countries.clear();
        assert!(matches!(r.validate(), Err(WbError::InvalidRequest(_))));
        let mut r = req();
        r.year_start = 2005;
        assert!(matches!(r.validate(), Err(WbError::InvalidRequest(_))));
        let mut r = req();
        r.countries = vec!["KE N".into()];
        assert!(r.validate().is_err());
    }

    #[test]
    fn rate_limit_spaces_requests() {
        let t = HttpTransport::new(5, Duration::from_secs(1));
        let start = Instant::now();
        for _ in 0..3 {
            t.throttle();
        }
        // three requests at 5/s need at least two 200 ms gaps
        assert!(start.elapsed() >= Duration::from_millis(400));
    }
}
