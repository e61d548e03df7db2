//! Remote attestation and secret provisioning.
//!
//! A middlebox instance must prove *what it is* before it may receive keys.
//! The identity of an instance is its measurement: a digest over an
//! operator-chosen identity string and the canonical form of its element
//! graph, so any change to the processing logic changes the measurement.
//!
//! The configuration and attestation service (CAS) holds the operator's
//! policy: which measurements are trusted, and which secrets each one
//! receives. An instance bootstraps like this:
//!
//! 1. `hello`: the client opens a channel with a fresh Diffie-Hellman
//!    public value.
//! 2. `challenge`: the CAS answers with its own public value and a random
//!    nonce. Both sides derive the session key; the client binds the
//!    channel into the attestation by hashing the nonce together with its
//!    own public value to form the *effective nonce*.
//! 3. `quote`: the client presents a hardware-backed quote over its
//!    measurement and the effective nonce. Because the effective nonce
//!    depends on the channel, a quote lifted from one session cannot be
//!    replayed on another, and a man in the middle relaying the quote ends
//!    up with a channel key the client never confirms.
//! 4. `provision` or `reject`: the CAS verifies the quote (signature,
//!    nonce freshness, enclave flag, policy) and either returns the
//!    secrets encrypted under the session key, or a reason.
//!
//! The same port also answers plain HTTP (`PUT /policy/...`,
//! `GET /instances`) for operator tooling; the server tells the two
//! protocols apart by peeking at the first bytes of the connection.
//!
//! A local attestation service (LAS) runs next to instances and caches
//! provisioned secrets per measurement, attesting to the CAS on a cache
//! miss. Restarting instances then reach a warm cache without a wide-area
//! round trip.
//!
//! The hardware attestation key is simulated by an environment-provided
//! machine secret (`SLICK_HW_KEY`); quotes are authenticated with it and
//! verified by services holding the same secret, standing in for the
//! processor's attestation infrastructure.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use num_bigint::BigUint;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::crypto::{derive_key, hmac_sha256, sha256, Gcm256};

/// Name of the environment variable holding the simulated per-machine
/// hardware secret.
pub const HW_KEY_ENV: &str = "SLICK_HW_KEY";

const DEV_HW_SECRET: &[u8] = b"slick-dev-hardware-secret";

/// The simulated hardware secret for this process: `SLICK_HW_KEY` if set,
/// otherwise a fixed development value.
pub fn hw_secret_from_env() -> Vec<u8> {
    std::env::var(HW_KEY_ENV)
        .map(|v| v.into_bytes())
        .unwrap_or_else(|_| DEV_HW_SECRET.to_vec())
}

/// Per-instance holder of secrets.
///
/// Keys arrive either from the provisioning service after attestation, or,
/// for standalone runs, are derived from the simulated hardware secret so a
/// single machine can seal and unseal its own traffic and state without any
/// infrastructure.
pub struct SecretStore {
    hw_secret: Vec<u8>,
    provisioned: Mutex<HashMap<String, Vec<u8>>>,
}

impl SecretStore {
    pub fn new(hw_secret: Vec<u8>) -> Self {
        SecretStore {
            hw_secret,
            provisioned: Mutex::new(HashMap::new()),
        }
    }

    /// Hardware secret from `SLICK_HW_KEY`, falling back to a fixed
    /// development value.
    pub fn from_env() -> Self {
        SecretStore::new(hw_secret_from_env())
    }

    /// Store a provisioned secret under a name.
    pub fn insert(&self, name: &str, value: Vec<u8>) {
        self.provisioned.lock().unwrap().insert(name.to_string(), value);
    }

    pub fn lookup(&self, name: &str) -> Option<Vec<u8>> {
        self.provisioned.lock().unwrap().get(name).cloned()
    }

    /// Key for a named security association: the provisioned value if one
    /// arrived, otherwise derived locally from the hardware secret.
    pub fn sa_key(&self, sa_name: &str) -> [u8; 32] {
        if let Some(v) = self.lookup(sa_name) {
            if v.len() == 32 {
                let mut k = [0u8; 32];
                k.copy_from_slice(&v);
                return k;
            }
            log::warn!("provisioned secret `{sa_name}` is not 32 bytes; deriving instead");
        }
        derive_key(&self.hw_secret, "sa-key", sa_name.as_bytes())
    }

    /// Key for sealing persistent state, bound to a context string (the
    /// instance's identity).
    pub fn state_seal_key(&self, context: &str) -> [u8; 32] {
        derive_key(&self.hw_secret, "state-seal", context.as_bytes())
    }
}

/// The measurement of an instance: a digest binding the operator-chosen
/// identity to the canonical element graph.
pub fn measurement(identity: &str, canonical_config: &str) -> String {
    let mut input = Vec::new();
    input.extend_from_slice(&(identity.len() as u32).to_le_bytes());
    input.extend_from_slice(identity.as_bytes());
    input.extend_from_slice(canonical_config.as_bytes());
    hex::encode(sha256(&input))
}

/// A simulated hardware quote: an authenticated statement that code with
/// `measurement` runs inside an enclave (`sgx`) and saw `nonce`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct AttestationQuote {
    pub measurement: String,
    /// Hex of the 16 byte effective nonce the quote answers.
    pub nonce: String,
    /// Whether the platform reports enclave execution.
    pub sgx: bool,
    /// Hex of the 32 byte authentication tag from the hardware key.
    pub mac: String,
}

fn quote_mac(hw_secret: &[u8], measurement: &str, nonce: &[u8], sgx: bool) -> [u8; 32] {
    let mut msg = Vec::with_capacity(5 + measurement.len() + nonce.len() + 1);
    msg.extend_from_slice(b"quote");
    msg.extend_from_slice(measurement.as_bytes());
    msg.extend_from_slice(nonce);
    msg.push(sgx as u8);
    hmac_sha256(hw_secret, &msg)
}

/// Produce a quote under the machine's hardware secret.
pub fn generate_quote(
    hw_secret: &[u8],
    measurement: &str,
    nonce: &[u8; 16],
    sgx: bool,
) -> AttestationQuote {
    AttestationQuote {
        measurement: measurement.to_string(),
        nonce: hex::encode(nonce),
        sgx,
        mac: hex::encode(quote_mac(hw_secret, measurement, nonce, sgx)),
    }
}

/// Check a quote's authentication tag (not its nonce or policy standing).
pub fn verify_quote_mac(hw_secret: &[u8], quote: &AttestationQuote) -> bool {
    let Ok(nonce) = hex::decode(&quote.nonce) else {
        return false;
    };
    let Ok(mac) = hex::decode(&quote.mac) else {
        return false;
    };
    let expect = quote_mac(hw_secret, &quote.measurement, &nonce, quote.sgx);
    // Fold the comparison so it does not exit early on the first mismatch.
    mac.len() == 32
        && mac
            .iter()
            .zip(expect.iter())
            .fold(0u8, |acc, (a, b)| acc | (a ^ b))
            == 0
}

// 2048-bit MODP group (RFC 3526, group 14), generator 2. A fixed,
// published group: both sides know it, only the exponents are secret.
const MODP_2048_HEX: &str = concat!(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74",
    "020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437",
    "4FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED",
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF05",
    "98DA48361C55D39A69163FA8FD24CF5F83655D23DCA3AD961C62F356208552BB",
    "9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B",
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF695581718",
    "3995497CEA956AE515D2261898FA051015728E5A8AACAA68FFFFFFFFFFFFFFFF",
);

fn modp_prime() -> BigUint {
    BigUint::parse_bytes(MODP_2048_HEX.as_bytes(), 16).expect("fixed prime parses")
}

const DH_LEN: usize = 256;

struct DhKeypair {
    private: BigUint,
    public_bytes: Vec<u8>,
}

fn dh_keypair() -> DhKeypair {
    let p = modp_prime();
    let mut exp = [0u8; 32];
    rand::thread_rng().fill_bytes(&mut exp);
    let private = BigUint::from_bytes_be(&exp);
    let public = BigUint::from(2u32).modpow(&private, &p);
    DhKeypair {
        private,
        public_bytes: to_fixed_be(&public),
    }
}

fn to_fixed_be(n: &BigUint) -> Vec<u8> {
    let raw = n.to_bytes_be();
    let mut out = vec![0u8; DH_LEN - raw.len()];
    out.extend_from_slice(&raw);
    out
}

/// Derive the session key from the shared secret, bound to both public
/// values (client first) so the two directions of a swapped transcript
/// cannot be confused.
fn session_key(
    keypair: &DhKeypair,
    peer_public_hex: &str,
    client_pub: &[u8],
    server_pub: &[u8],
) -> Result<[u8; 32], AttestError> {
    let peer_bytes =
        hex::decode(peer_public_hex).map_err(|_| AttestError::protocol("public value is not hex"))?;
    let p = modp_prime();
    let peer = BigUint::from_bytes_be(&peer_bytes);
    let one = BigUint::from(1u32);
    if peer <= one || peer >= &p - &one {
        return Err(AttestError::protocol("degenerate public value"));
    }
    let shared = peer.modpow(&keypair.private, &p);
    let mut context = Vec::with_capacity(2 * DH_LEN);
    context.extend_from_slice(client_pub);
    context.extend_from_slice(server_pub);
    Ok(derive_key(&to_fixed_be(&shared), "attest-session", &context))
}

/// The channel-bound nonce a quote must answer: the server's challenge
/// nonce hashed with the client's public value.
pub fn effective_nonce(cas_nonce: &[u8; 16], client_public: &[u8]) -> [u8; 16] {
    let mut input = Vec::with_capacity(16 + client_public.len());
    input.extend_from_slice(cas_nonce);
    input.extend_from_slice(client_public);
    let h = sha256(&input);
    h[..16].try_into().unwrap()
}

#[derive(Debug, thiserror::Error)]
pub enum AttestError {
    #[error("attestation i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("attestation protocol: {0}")]
    Protocol(String),
    #[error("attestation rejected: {0}")]
    Rejected(String),
}

impl AttestError {
    fn protocol(msg: impl Into<String>) -> Self {
        AttestError::Protocol(msg.into())
    }
}

// ---------------------------------------------------------------------------
// Wire format: u32 little-endian length prefix, JSON payload.

const MAX_FRAME: usize = 1 << 20;

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Msg {
    Hello {
        client: String,
        eph_pub: String,
    },
    Challenge {
        cas_nonce: String,
        eph_pub: String,
    },
    Quote {
        quote: AttestationQuote,
    },
    Provision {
        nonce: String,
        sealed: String,
    },
    Reject {
        reason: String,
    },
}

fn write_frame(stream: &mut TcpStream, msg: &Msg, transcript: &mut Vec<Vec<u8>>) -> Result<(), AttestError> {
    let body = serde_json::to_vec(msg).expect("message serializes");
    let mut frame = Vec::with_capacity(4 + body.len());
    frame.extend_from_slice(&(body.len() as u32).to_le_bytes());
    frame.extend_from_slice(&body);
    stream.write_all(&frame)?;
    transcript.push(frame);
    Ok(())
}

fn read_frame(stream: &mut TcpStream, transcript: &mut Vec<Vec<u8>>) -> Result<Msg, AttestError> {
    let mut len_bytes = [0u8; 4];
    stream.read_exact(&mut len_bytes)?;
    let len = u32::from_le_bytes(len_bytes) as usize;
    if len > MAX_FRAME {
        return Err(AttestError::protocol("oversized frame"));
    }
    let mut body = vec![0u8; len];
    stream.read_exact(&mut body)?;
    let msg = serde_json::from_slice(&body)
        .map_err(|e| AttestError::protocol(format!("bad frame: {e}")))?;
    let mut frame = len_bytes.to_vec();
    frame.extend_from_slice(&body);
    transcript.push(frame);
    Ok(msg)
}

/// Map of secret name to secret bytes, as provisioned.
pub type Secrets = BTreeMap<String, Vec<u8>>;

#[derive(Serialize, Deserialize)]
struct SecretsDoc {
    secrets: BTreeMap<String, String>,
}

fn seal_secrets(key: &[u8; 32], eff_nonce: &[u8; 16], secrets: &Secrets) -> (String, String) {
    let doc = SecretsDoc {
        secrets: secrets
            .iter()
            .map(|(k, v)| (k.clone(), hex::encode(v)))
            .collect(),
    };
    let plaintext = serde_json::to_vec(&doc).expect("secrets serialize");
    let mut nonce = [0u8; 12];
    rand::thread_rng().fill_bytes(&mut nonce);
    let (ct, tag) = Gcm256::new(key).seal(&nonce, eff_nonce, &plaintext);
    let mut sealed = ct;
    sealed.extend_from_slice(&tag);
    (hex::encode(nonce), hex::encode(sealed))
}

fn open_secrets(
    key: &[u8; 32],
    eff_nonce: &[u8; 16],
    nonce_hex: &str,
    sealed_hex: &str,
) -> Result<Secrets, AttestError> {
    let nonce = hex::decode(nonce_hex).map_err(|_| AttestError::protocol("nonce is not hex"))?;
    let sealed = hex::decode(sealed_hex).map_err(|_| AttestError::protocol("box is not hex"))?;
    if sealed.len() < 16 {
        return Err(AttestError::protocol("sealed box too short"));
    }
    let (ct, tag) = sealed.split_at(sealed.len() - 16);
    let tag: [u8; 16] = tag.try_into().unwrap();
    let plaintext = Gcm256::new(key)
        .open(&nonce, eff_nonce, ct, &tag)
        .map_err(|_| AttestError::protocol("provisioned secrets failed authentication"))?;
    let doc: SecretsDoc = serde_json::from_slice(&plaintext)
        .map_err(|e| AttestError::protocol(format!("bad secrets document: {e}")))?;
    let mut out = Secrets::new();
    for (name, hex_value) in doc.secrets {
        let bytes =
            hex::decode(&hex_value).map_err(|_| AttestError::protocol("secret is not hex"))?;
        out.insert(name, bytes);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Client bootstrap.

/// One timed phase of a bootstrap.
#[derive(Debug, Clone, Serialize)]
pub struct Phase {
    pub name: String,
    pub duration_ns: u64,
}

/// Everything a bootstrap produced: the secrets, the raw transcript (for
/// audit: no secret material may appear in it), and per-phase timing.
#[derive(Debug)]
pub struct BootstrapOutcome {
    pub secrets: Secrets,
    pub transcript: Vec<Vec<u8>>,
    pub phases: Vec<Phase>,
    pub attempts: u32,
}

/// Knobs for [`bootstrap`]. `sgx` exists so tests can present a quote from
/// outside an enclave and watch it bounce.
pub struct BootstrapParams {
    pub client: String,
    pub measurement: String,
    pub sgx: bool,
    pub connect_attempts: u32,
    pub retry_delay: Duration,
}

impl BootstrapParams {
    pub fn new(client: &str, measurement: &str) -> Self {
        BootstrapParams {
            client: client.to_string(),
            measurement: measurement.to_string(),
            sgx: true,
            connect_attempts: 10,
            retry_delay: Duration::from_millis(100),
        }
    }
}

/// Attest to the service at `addr` and fetch this measurement's secrets.
pub fn bootstrap(
    addr: &str,
    hw_secret: &[u8],
    params: &BootstrapParams,
) -> Result<BootstrapOutcome, AttestError> {
    let mut phases = Vec::new();
    let mut transcript = Vec::new();

    let t = Instant::now();
    let mut attempts = 0;
    let mut stream = loop {
        attempts += 1;
        match TcpStream::connect(addr) {
            Ok(s) => break s,
            Err(e) if attempts < params.connect_attempts => {
                log::debug!("attestation connect attempt {attempts} failed: {e}; retrying");
                std::thread::sleep(params.retry_delay);
            }
            Err(e) => return Err(AttestError::Io(e)),
        }
    };
    phases.push(Phase {
        name: "connect".into(),
        duration_ns: t.elapsed().as_nanos() as u64,
    });

    let t = Instant::now();
    let keypair = dh_keypair();
    write_frame(
        &mut stream,
        &Msg::Hello {
            client: params.client.clone(),
            eph_pub: hex::encode(&keypair.public_bytes),
        },
        &mut transcript,
    )?;
    let Msg::Challenge { cas_nonce, eph_pub } = read_frame(&mut stream, &mut transcript)? else {
        return Err(AttestError::protocol("expected a challenge"));
    };
    let server_pub =
        hex::decode(&eph_pub).map_err(|_| AttestError::protocol("public value is not hex"))?;
    let key = session_key(&keypair, &eph_pub, &keypair.public_bytes, &server_pub)?;
    phases.push(Phase {
        name: "key_exchange".into(),
        duration_ns: t.elapsed().as_nanos() as u64,
    });

    let t = Instant::now();
    let cas_nonce: [u8; 16] = hex::decode(&cas_nonce)
        .ok()
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| AttestError::protocol("challenge nonce must be 16 bytes"))?;
    let eff = effective_nonce(&cas_nonce, &keypair.public_bytes);
    let quote = generate_quote(hw_secret, &params.measurement, &eff, params.sgx);
    write_frame(&mut stream, &Msg::Quote { quote }, &mut transcript)?;
    phases.push(Phase {
        name: "quote".into(),
        duration_ns: t.elapsed().as_nanos() as u64,
    });

    let t = Instant::now();
    let secrets = match read_frame(&mut stream, &mut transcript)? {
        Msg::Provision { nonce, sealed } => open_secrets(&key, &eff, &nonce, &sealed)?,
        Msg::Reject { reason } => return Err(AttestError::Rejected(reason)),
        _ => return Err(AttestError::protocol("expected provision or reject")),
    };
    phases.push(Phase {
        name: "provision".into(),
        duration_ns: t.elapsed().as_nanos() as u64,
    });

    Ok(BootstrapOutcome {
        secrets,
        transcript,
        phases,
        attempts,
    })
}

// ---------------------------------------------------------------------------
// CAS: policy, store, dual-protocol server.

/// A successfully attested instance, as listed by `GET /instances`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct InstanceRecord {
    pub client: String,
    pub measurement: String,
    pub unix_ms: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum StoreLine {
    Policy {
        measurement: String,
        secrets: BTreeMap<String, String>,
    },
    Attested {
        #[serde(flatten)]
        record: InstanceRecord,
    },
}

#[derive(Default)]
struct CasState {
    /// measurement -> secret name -> secret hex
    policy: HashMap<String, BTreeMap<String, String>>,
    attested: Vec<InstanceRecord>,
}

struct CasInner {
    hw_secret: Vec<u8>,
    state: Mutex<CasState>,
    store_path: Option<PathBuf>,
    rejections: AtomicU64,
    provisions: AtomicU64,
}

impl CasInner {
    fn append_store(&self, line: &StoreLine) {
        let Some(path) = &self.store_path else { return };
        let mut text = serde_json::to_string(line).expect("store line serializes");
        text.push('\n');
        let result = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .and_then(|mut f| f.write_all(text.as_bytes()));
        if let Err(e) = result {
            log::error!("cannot append to store {}: {e}", path.display());
        }
    }

    fn put_policy(&self, measurement: String, secrets: BTreeMap<String, String>) {
        self.append_store(&StoreLine::Policy {
            measurement: measurement.clone(),
            secrets: secrets.clone(),
        });
        self.state.lock().unwrap().policy.insert(measurement, secrets);
    }

    fn load_store(&self, path: &PathBuf) -> std::io::Result<()> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
            Err(e) => return Err(e),
        };
        let mut state = self.state.lock().unwrap();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str::<StoreLine>(line) {
                Ok(StoreLine::Policy {
                    measurement,
                    secrets,
                }) => {
                    state.policy.insert(measurement, secrets);
                }
                Ok(StoreLine::Attested { record }) => state.attested.push(record),
                Err(e) => log::warn!("skipping bad store line: {e}"),
            }
        }
        Ok(())
    }
}

/// Handle to a running attestation service; the server stops when dropped.
pub struct ServiceHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    join: Option<std::thread::JoinHandle<()>>,
    cas: Option<Arc<CasInner>>,
    las: Option<Arc<LasInner>>,
}

impl ServiceHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Quotes refused so far (CAS only).
    pub fn rejections(&self) -> u64 {
        self.cas.as_ref().map_or(0, |c| c.rejections.load(Ordering::Relaxed))
    }

    /// Successful provisions so far (CAS only).
    pub fn provisions(&self) -> u64 {
        self.cas.as_ref().map_or(0, |c| c.provisions.load(Ordering::Relaxed))
    }

    /// Cache activity (LAS only): (hits, misses).
    pub fn cache_stats(&self) -> (u64, u64) {
        self.las.as_ref().map_or((0, 0), |l| {
            (
                l.cache_hits.load(Ordering::Relaxed),
                l.cache_misses.load(Ordering::Relaxed),
            )
        })
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        // Nudge the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Start a CAS on `bind_addr` (use port 0 to pick a free port). `store`
/// persists policy and attestation records as JSON lines and is replayed
/// on startup.
pub fn spawn_cas(
    bind_addr: &str,
    hw_secret: Vec<u8>,
    store: Option<PathBuf>,
) -> std::io::Result<ServiceHandle> {
    let listener = TcpListener::bind(bind_addr)?;
    let addr = listener.local_addr()?;
    let inner = Arc::new(CasInner {
        hw_secret,
        state: Mutex::new(CasState::default()),
        store_path: store.clone(),
        rejections: AtomicU64::new(0),
        provisions: AtomicU64::new(0),
    });
    if let Some(path) = &store {
        inner.load_store(path)?;
    }
    let stop = Arc::new(AtomicBool::new(false));
    let join = {
        let inner = Arc::clone(&inner);
        let stop = Arc::clone(&stop);
        std::thread::spawn(move || serve(listener, stop, move |stream| {
            let inner = Arc::clone(&inner);
            std::thread::spawn(move || handle_cas_conn(stream, inner));
        }))
    };
    log::info!("attestation service listening on {addr}");
    Ok(ServiceHandle {
        addr,
        stop,
        join: Some(join),
        cas: Some(inner),
        las: None,
    })
}

fn serve(
    listener: TcpListener,
    stop: Arc<AtomicBool>,
    mut on_conn: impl FnMut(TcpStream),
) {
    for conn in listener.incoming() {
        if stop.load(Ordering::Relaxed) {
            break;
        }
        match conn {
            Ok(stream) => on_conn(stream),
            Err(e) => {
                log::warn!("accept failed: {e}");
            }
        }
    }
}

fn handle_cas_conn(mut stream: TcpStream, inner: Arc<CasInner>) {
    let _ = stream.set_read_timeout(Some(Duration::from_secs(10)));
    let mut peek = [0u8; 4];
    let Ok(n) = stream.peek(&mut peek) else { return };
    if is_http_verb(&peek[..n]) {
        if let Err(e) = handle_http(&mut stream, &inner) {
            log::debug!("http connection ended: {e}");
        }
        return;
    }
    let result = attest_session(
        &mut stream,
        &inner.hw_secret,
        |quote| {
            let state = inner.state.lock().unwrap();
            match state.policy.get(&quote.measurement) {
                Some(secrets) => {
                    let mut out = Secrets::new();
                    for (name, hex_value) in secrets {
                        match hex::decode(hex_value) {
                            Ok(bytes) => {
                                out.insert(name.clone(), bytes);
                            }
                            Err(_) => log::error!("policy secret `{name}` is not hex; skipping"),
                        }
                    }
                    Ok(out)
                }
                None => Err("unknown measurement".to_string()),
            }
        },
        // Record the verdict before the reply leaves, so a client that saw
        // the reply is guaranteed to be visible in the records.
        |outcome| match outcome {
            Ok((client, measurement)) => {
                inner.provisions.fetch_add(1, Ordering::Relaxed);
                let record = InstanceRecord {
                    client: client.to_string(),
                    measurement: measurement.to_string(),
                    unix_ms: std::time::SystemTime::now()
                        .duration_since(std::time::UNIX_EPOCH)
                        .map(|d| d.as_millis() as u64)
                        .unwrap_or(0),
                };
                inner.append_store(&StoreLine::Attested {
                    record: record.clone(),
                });
                inner.state.lock().unwrap().attested.push(record);
            }
            Err(reason) => {
                inner.rejections.fetch_add(1, Ordering::Relaxed);
                log::debug!("quote refused: {reason}");
            }
        },
    );
    if let Err(e) = result {
        log::debug!("attestation session failed: {e}");
    }
}

/// Server side of one attestation session. `lookup` maps an accepted
/// quote's measurement to the secrets it should receive, or a rejection
/// reason; `before_reply` observes the verdict before the final frame is
/// written. Returns the client name and measurement on success.
fn attest_session(
    stream: &mut TcpStream,
    hw_secret: &[u8],
    lookup: impl FnOnce(&AttestationQuote) -> Result<Secrets, String>,
    before_reply: impl FnOnce(Result<(&str, &str), &str>),
) -> Result<(String, String), AttestError> {
    let mut transcript = Vec::new();
    let Msg::Hello { client, eph_pub } = read_frame(stream, &mut transcript)? else {
        return Err(AttestError::protocol("expected hello"));
    };
    let client_pub =
        hex::decode(&eph_pub).map_err(|_| AttestError::protocol("public value is not hex"))?;
    let keypair = dh_keypair();
    let mut cas_nonce = [0u8; 16];
    rand::thread_rng().fill_bytes(&mut cas_nonce);
    write_frame(
        stream,
        &Msg::Challenge {
            cas_nonce: hex::encode(cas_nonce),
            eph_pub: hex::encode(&keypair.public_bytes),
        },
        &mut transcript,
    )?;
    let key = session_key(&keypair, &eph_pub, &client_pub, &keypair.public_bytes)?;
    let eff = effective_nonce(&cas_nonce, &client_pub);

    let Msg::Quote { quote } = read_frame(stream, &mut transcript)? else {
        return Err(AttestError::protocol("expected quote"));
    };
    let decision = if !verify_quote_mac(hw_secret, &quote) {
        Err("quote signature invalid".to_string())
    } else if quote.nonce != hex::encode(eff) {
        Err("quote answers a different channel".to_string())
    } else if !quote.sgx {
        Err("platform does not report enclave execution".to_string())
    } else {
        lookup(&quote)
    };
    match decision {
        Ok(secrets) => {
            before_reply(Ok((&client, &quote.measurement)));
            let (nonce, sealed) = seal_secrets(&key, &eff, &secrets);
            write_frame(stream, &Msg::Provision { nonce, sealed }, &mut transcript)?;
            Ok((client, quote.measurement))
        }
        Err(reason) => {
            before_reply(Err(&reason));
            write_frame(
                stream,
                &Msg::Reject {
                    reason: reason.clone(),
                },
                &mut transcript,
            )?;
            Err(AttestError::Rejected(reason))
        }
    }
}

// ---------------------------------------------------------------------------
// Minimal HTTP for operator tooling on the same port.

fn is_http_verb(head: &[u8]) -> bool {
    head.len() >= 4
        && (head.starts_with(b"GET ")
            || head.starts_with(b"PUT ")
            || head.starts_with(b"POST")
            || head.starts_with(b"HEAD")
            || head.starts_with(b"DELE"))
}

fn http_respond(stream: &mut TcpStream, status: &str, body: &str) -> std::io::Result<()> {
    let response = format!(
        "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    stream.write_all(response.as_bytes())
}

fn handle_http(stream: &mut TcpStream, inner: &CasInner) -> std::io::Result<()> {
    // Read the request head until the blank line, then the declared body.
    let mut buf = Vec::new();
    let mut byte = [0u8; 1];
    while !buf.ends_with(b"\r\n\r\n") && buf.len() < 64 * 1024 {
        let n = stream.read(&mut byte)?;
        if n == 0 {
            break;
        }
        buf.push(byte[0]);
    }
    let head = String::from_utf8_lossy(&buf).to_string();
    let mut lines = head.lines();
    let request = lines.next().unwrap_or_default().to_string();
    let mut content_length = 0usize;
    for line in lines {
        if let Some((name, value)) = line.split_once(':') {
            if name.eq_ignore_ascii_case("content-length") {
                content_length = value.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; content_length.min(1 << 20)];
    if !body.is_empty() {
        stream.read_exact(&mut body)?;
    }

    let mut parts = request.split_whitespace();
    let method = parts.next().unwrap_or_default();
    let path = parts.next().unwrap_or_default();
    match (method, path) {
        ("PUT", p) if p.starts_with("/policy/") => {
            let measurement = p.trim_start_matches("/policy/").to_string();
            if measurement.len() != 64 || !measurement.bytes().all(|b| b.is_ascii_hexdigit()) {
                return http_respond(stream, "400 Bad Request", r#"{"error":"bad measurement"}"#);
            }
            #[derive(Deserialize)]
            struct PolicyBody {
                secrets: BTreeMap<String, String>,
            }
            match serde_json::from_slice::<PolicyBody>(&body) {
                Ok(p) => {
                    inner.put_policy(measurement, p.secrets);
                    http_respond(stream, "200 OK", r#"{"ok":true}"#)
                }
                Err(e) => http_respond(
                    stream,
                    "400 Bad Request",
                    &format!(r#"{{"error":"{e}"}}"#),
                ),
            }
        }
        ("GET", "/instances") => {
            let state = inner.state.lock().unwrap();
            let body = serde_json::to_string(&state.attested).expect("records serialize");
            http_respond(stream, "200 OK", &body)
        }
        _ => http_respond(stream, "404 Not Found", r#"{"error":"no such resource"}"#),
    }
}

/// Operator tooling: install the policy for a measurement over HTTP.
pub fn http_put_policy(
    addr: &str,
    measurement: &str,
    secrets: &BTreeMap<String, String>,
) -> Result<(), AttestError> {
    #[derive(Serialize)]
    struct PolicyBody<'a> {
        secrets: &'a BTreeMap<String, String>,
    }
    let body = serde_json::to_string(&PolicyBody { secrets }).expect("body serializes");
    let response = http_request(
        addr,
        &format!("PUT /policy/{measurement} HTTP/1.1"),
        Some(&body),
    )?;
    if response.0.contains("200") {
        Ok(())
    } else {
        Err(AttestError::protocol(format!(
            "policy install failed: {} {}",
            response.0, response.1
        )))
    }
}

/// Operator tooling: list attested instances over HTTP.
pub fn http_get_instances(addr: &str) -> Result<Vec<InstanceRecord>, AttestError> {
    let (status, body) = http_request(addr, "GET /instances HTTP/1.1", None)?;
    if !status.contains("200") {
        return Err(AttestError::protocol(format!("instance list failed: {status}")));
    }
    serde_json::from_str(&body).map_err(|e| AttestError::protocol(format!("bad instance list: {e}")))
}

fn http_request(
    addr: &str,
    request_line: &str,
    body: Option<&str>,
) -> Result<(String, String), AttestError> {
    let mut stream = TcpStream::connect(addr)?;
    let body = body.unwrap_or_default();
    let request = format!(
        "{request_line}\r\nHost: {addr}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    stream.write_all(request.as_bytes())?;
    let mut response = String::new();
    stream.read_to_string(&mut response)?;
    let (head, payload) = response
        .split_once("\r\n\r\n")
        .ok_or_else(|| AttestError::protocol("malformed http response"))?;
    let status = head.lines().next().unwrap_or_default().to_string();
    Ok((status, payload.to_string()))
}

// ---------------------------------------------------------------------------
// LAS: a local caching attestation service.

struct LasInner {
    hw_secret: Vec<u8>,
    cas_addr: String,
    cache: Mutex<HashMap<String, Secrets>>,
    cache_hits: AtomicU64,
    cache_misses: AtomicU64,
}

/// Start a LAS on `bind_addr`, backed by the CAS at `cas_addr`. The LAS
/// verifies local quotes itself and fetches each measurement's secrets from
/// the CAS once, on first use.
pub fn spawn_las(
    bind_addr: &str,
    cas_addr: &str,
    hw_secret: Vec<u8>,
) -> std::io::Result<ServiceHandle> {
    let listener = TcpListener::bind(bind_addr)?;
    let addr = listener.local_addr()?;
    let inner = Arc::new(LasInner {
        hw_secret,
        cas_addr: cas_addr.to_string(),
        cache: Mutex::new(HashMap::new()),
        cache_hits: AtomicU64::new(0),
        cache_misses: AtomicU64::new(0),
    });
    let stop = Arc::new(AtomicBool::new(false));
    let join = {
        let inner = Arc::clone(&inner);
        let stop = Arc::clone(&stop);
        std::thread::spawn(move || {
            serve(listener, stop, move |stream| {
                let inner = Arc::clone(&inner);
                std::thread::spawn(move || handle_las_conn(stream, inner));
            })
        })
    };
    log::info!("local attestation service listening on {addr}, backed by {cas_addr}");
    Ok(ServiceHandle {
        addr,
        stop,
        join: Some(join),
        cas: None,
        las: Some(inner),
    })
}

fn handle_las_conn(mut stream: TcpStream, inner: Arc<LasInner>) {
    let _ = stream.set_read_timeout(Some(Duration::from_secs(10)));
    let result = attest_session(
        &mut stream,
        &inner.hw_secret,
        |quote| {
            if let Some(secrets) = inner.cache.lock().unwrap().get(&quote.measurement) {
                inner.cache_hits.fetch_add(1, Ordering::Relaxed);
                return Ok(secrets.clone());
            }
            inner.cache_misses.fetch_add(1, Ordering::Relaxed);
            // Cache miss: attest to the CAS for this measurement. Local
            // attestation lets the LAS quote on behalf of code it verified
            // on the same machine.
            let params = BootstrapParams {
                client: "las".to_string(),
                measurement: quote.measurement.clone(),
                sgx: true,
                connect_attempts: 3,
                retry_delay: Duration::from_millis(50),
            };
            match bootstrap(&inner.cas_addr, &inner.hw_secret, &params) {
                Ok(outcome) => {
                    inner
                        .cache
                        .lock()
                        .unwrap()
                        .insert(quote.measurement.clone(), outcome.secrets.clone());
                    Ok(outcome.secrets)
                }
                Err(e) => Err(format!("upstream attestation failed: {e}")),
            }
        },
        |_| {},
    );
    if let Err(e) = result {
        log::debug!("las session failed: {e}");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_keys_are_stable_and_separated() {
        let s = SecretStore::new(b"hw".to_vec());
        assert_eq!(s.sa_key("sa1"), s.sa_key("sa1"));
        assert_ne!(s.sa_key("sa1"), s.sa_key("sa2"));
        assert_ne!(s.sa_key("x").to_vec(), s.state_seal_key("x").to_vec());
    }

    #[test]
    fn provisioned_keys_win_over_derived() {
        let s = SecretStore::new(b"hw".to_vec());
        let derived = s.sa_key("sa1");
        s.insert("sa1", vec![9u8; 32]);
        assert_eq!(s.sa_key("sa1"), [9u8; 32]);
        assert_ne!(s.sa_key("sa1"), derived);
    }

    #[test]
    fn measurement_binds_identity_and_config() {
        let m1 = measurement("fw1", "a::Wire;");
        assert_eq!(m1, measurement("fw1", "a::Wire;"));
        assert_ne!(m1, measurement("fw2", "a::Wire;"));
        assert_ne!(m1, measurement("fw1", "a::Counter;"));
        // Length framing: shifting bytes between the parts changes it.
        assert_ne!(measurement("ab", "c"), measurement("a", "bc"));
    }

    #[test]
    fn quotes_verify_and_tampering_breaks_them() {
        let hw = b"machine";
        let nonce = [3u8; 16];
        let q = generate_quote(hw, "aa".repeat(32).as_str(), &nonce, true);
        assert!(verify_quote_mac(hw, &q));
        let mut bad = q.clone();
        bad.sgx = false;
        assert!(!verify_quote_mac(hw, &bad));
        let mut bad = q.clone();
        bad.measurement = "bb".repeat(32);
        assert!(!verify_quote_mac(hw, &bad));
        assert!(!verify_quote_mac(b"other machine", &q));
    }

    #[test]
    fn effective_nonce_binds_the_channel() {
        let n = [1u8; 16];
        assert_eq!(effective_nonce(&n, b"pub"), effective_nonce(&n, b"pub"));
        assert_ne!(effective_nonce(&n, b"pub"), effective_nonce(&n, b"other"));
        assert_ne!(effective_nonce(&[2u8; 16], b"pub"), effective_nonce(&n, b"pub"));
    }

    #[test]
    fn dh_agreement_and_degenerate_values() {
        let a = dh_keypair();
        let b = dh_keypair();
        let ka = session_key(
            &a,
            &hex::encode(&b.public_bytes),
            &a.public_bytes,
            &b.public_bytes,
        )
        .unwrap();
        let kb = session_key(
            &b,
            &hex::encode(&a.public_bytes),
            &a.public_bytes,
            &b.public_bytes,
        )
        .unwrap();
        assert_eq!(ka, kb);
        // 0, 1 and p-1 must be refused.
        for bad in [
            BigUint::from(0u32),
            BigUint::from(1u32),
            modp_prime() - BigUint::from(1u32),
        ] {
            let res = session_key(&a, &hex::encode(to_fixed_be(&bad)), b"", b"");
            assert!(res.is_err(), "degenerate value accepted");
        }
    }

    fn hexkey(b: u8) -> String {
        hex::encode([b; 32])
    }

    #[test]
    fn end_to_end_provisioning_with_policy() {
        let hw = b"machine-secret".to_vec();
        let cas = spawn_cas("127.0.0.1:0", hw.clone(), None).unwrap();
        let m = measurement("fw1", "canonical");
        let mut secrets = BTreeMap::new();
        secrets.insert("sa_wan".to_string(), hexkey(0xA1));
        secrets.insert("sa_lan".to_string(), hexkey(0xB2));
        http_put_policy(&cas.addr().to_string(), &m, &secrets).unwrap();

        let outcome = bootstrap(
            &cas.addr().to_string(),
            &hw,
            &BootstrapParams::new("fw1", &m),
        )
        .unwrap();
        assert_eq!(outcome.secrets.len(), 2);
        assert_eq!(outcome.secrets["sa_wan"], vec![0xA1; 32]);
        assert_eq!(outcome.phases.len(), 4);

        // The transcript never carries secret material in the clear.
        for frame in &outcome.transcript {
            for secret in outcome.secrets.values() {
                assert!(
                    !frame.windows(secret.len()).any(|w| w == &secret[..]),
                    "secret bytes leaked into the transcript"
                );
            }
            let hw_hex = hex::encode(&hw);
            let text = String::from_utf8_lossy(frame);
            assert!(!text.contains(&hw_hex));
        }

        let instances = http_get_instances(&cas.addr().to_string()).unwrap();
        assert_eq!(instances.len(), 1);
        assert_eq!(instances[0].client, "fw1");
        assert_eq!(instances[0].measurement, m);
        assert_eq!(cas.provisions(), 1);
        cas.stop();
    }

    #[test]
    fn all_four_rejection_reasons() {
        let hw = b"hw".to_vec();
        let cas = spawn_cas("127.0.0.1:0", hw.clone(), None).unwrap();
        let addr = cas.addr().to_string();
        let m = measurement("fw", "cfg");
        http_put_policy(&addr, &m, &BTreeMap::new()).unwrap();

        // Unknown measurement.
        let unknown = measurement("other", "cfg");
        let err = bootstrap(&addr, &hw, &BootstrapParams::new("x", &unknown)).unwrap_err();
        assert!(matches!(&err, AttestError::Rejected(r) if r.contains("unknown measurement")));

        // Wrong hardware key: the quote's signature cannot verify.
        let err = bootstrap(&addr, b"wrong-hw", &BootstrapParams::new("x", &m)).unwrap_err();
        assert!(matches!(&err, AttestError::Rejected(r) if r.contains("signature")));

        // Not inside an enclave.
        let mut params = BootstrapParams::new("x", &m);
        params.sgx = false;
        let err = bootstrap(&addr, &hw, &params).unwrap_err();
        assert!(matches!(&err, AttestError::Rejected(r) if r.contains("enclave")));

        // Stale nonce: a quote for a different channel binding.
        let err = replay_attack(&addr, &hw, &m).unwrap_err();
        assert!(matches!(&err, AttestError::Rejected(r) if r.contains("different channel")));

        assert_eq!(cas.rejections(), 4);
        assert_eq!(cas.provisions(), 0);
        cas.stop();
    }

    /// Run the protocol but answer with a quote for a stale nonce, the way
    /// a replayed transcript would.
    fn replay_attack(addr: &str, hw: &[u8], m: &str) -> Result<Secrets, AttestError> {
        let mut transcript = Vec::new();
        let mut stream = TcpStream::connect(addr)?;
        let keypair = dh_keypair();
        write_frame(
            &mut stream,
            &Msg::Hello {
                client: "replayer".into(),
                eph_pub: hex::encode(&keypair.public_bytes),
            },
            &mut transcript,
        )?;
        let Msg::Challenge { cas_nonce, eph_pub } = read_frame(&mut stream, &mut transcript)?
        else {
            return Err(AttestError::protocol("expected challenge"));
        };
        let server_pub = hex::decode(&eph_pub).unwrap();
        let key = session_key(&keypair, &eph_pub, &keypair.public_bytes, &server_pub)?;
        let _ = (cas_nonce, &key);
        // A stale nonce from some earlier session.
        let stale = [0x55u8; 16];
        let quote = generate_quote(hw, m, &stale, true);
        write_frame(&mut stream, &Msg::Quote { quote }, &mut transcript)?;
        match read_frame(&mut stream, &mut transcript)? {
            Msg::Provision { nonce, sealed } => {
                let eff = stale;
                open_secrets(&key, &eff, &nonce, &sealed)
            }
            Msg::Reject { reason } => Err(AttestError::Rejected(reason)),
            _ => Err(AttestError::protocol("unexpected message")),
        }
    }

    #[test]
    fn store_survives_restart() {
        let dir = tempfile::tempdir().unwrap();
        let store = dir.path().join("cas.jsonl");
        let hw = b"hw".to_vec();
        let m = measurement("fw", "cfg");
        {
            let cas = spawn_cas("127.0.0.1:0", hw.clone(), Some(store.clone())).unwrap();
            let mut secrets = BTreeMap::new();
            secrets.insert("sa".to_string(), hexkey(0x11));
            http_put_policy(&cas.addr().to_string(), &m, &secrets).unwrap();
            bootstrap(
                &cas.addr().to_string(),
                &hw,
                &BootstrapParams::new("fw", &m),
            )
            .unwrap();
            cas.stop();
        }
        // A new service over the same store remembers both policy and
        // attestation history.
        let cas = spawn_cas("127.0.0.1:0", hw.clone(), Some(store)).unwrap();
        let outcome = bootstrap(
            &cas.addr().to_string(),
            &hw,
            &BootstrapParams::new("fw", &m),
        )
        .unwrap();
        assert_eq!(outcome.secrets["sa"], vec![0x11; 32]);
        let instances = http_get_instances(&cas.addr().to_string()).unwrap();
        assert_eq!(instances.len(), 2);
        cas.stop();
    }

    #[test]
    fn las_caches_per_measurement() {
        let hw = b"hw".to_vec();
        let cas = spawn_cas("127.0.0.1:0", hw.clone(), None).unwrap();
        let m = measurement("fw", "cfg");
        let mut secrets = BTreeMap::new();
        secrets.insert("sa".to_string(), hexkey(0x42));
        http_put_policy(&cas.addr().to_string(), &m, &secrets).unwrap();

        let las = spawn_las("127.0.0.1:0", &cas.addr().to_string(), hw.clone()).unwrap();
        let las_addr = las.addr().to_string();
        let first = bootstrap(&las_addr, &hw, &BootstrapParams::new("fw", &m)).unwrap();
        assert_eq!(first.secrets["sa"], vec![0x42; 32]);
        assert_eq!(las.cache_stats(), (0, 1));
        // Second bootstrap is served from the cache; the CAS sees nothing.
        let second = bootstrap(&las_addr, &hw, &BootstrapParams::new("fw", &m)).unwrap();
        assert_eq!(second.secrets["sa"], vec![0x42; 32]);
        assert_eq!(las.cache_stats(), (1, 1));
        assert_eq!(cas.provisions(), 1, "cas attested the las exactly once");
        las.stop();
        cas.stop();
    }
}
