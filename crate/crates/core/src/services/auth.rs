//! Session tokens and the registry's user file.
//!
//! A token is `base64url(payload JSON) "." hex(HMAC-SHA256(vo_secret, payload))`.
//! Every node holds the VO secret, so validation needs no round trip to the
//! registry.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use hmac::{Hmac, KeyInit, Mac};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

type HmacSha256 = Hmac<Sha256>;

pub const DEFAULT_TTL_S: i64 = 8 * 3600;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AuthError {
    #[error("BadCredentials")]
    BadCredentials,
    #[error("UserUnknown")]
    UserUnknown,
    #[error("token expired")]
    Expired,
    #[error("bad token signature")]
    BadSignature,
    #[error("{0}")]
    AuthFailure(String),
}

impl AuthError {
    pub fn code(&self) -> &'static str {
        match self {
            AuthError::BadCredentials => "BadCredentials",
            AuthError::UserUnknown => "UserUnknown",
            AuthError::Expired => "Expired",
            AuthError::BadSignature => "BadSignature",
            AuthError::AuthFailure(_) => "AuthFailure",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Clinician,
    Admin,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Clinician => "clinician",
            Role::Admin => "admin",
        })
    }
}

impl FromStr for Role {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "clinician" => Ok(Role::Clinician),
            "admin" => Ok(Role::Admin),
            other => Err(format!("unknown role `{other}`")),
        }
    }
}

/// Token payload. Times are Unix seconds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claims {
    pub user: String,
    pub issued_at: i64,
    pub expires_at: i64,
    pub roles: Vec<Role>,
}

impl Claims {
    pub fn new(user: &str, roles: &[Role], now_s: i64, ttl_s: i64) -> Claims {
        let mut roles = roles.to_vec();
        roles.sort();
        roles.dedup();
        Claims {
            user: user.to_string(),
            issued_at: now_s,
            expires_at: now_s + ttl_s.max(1),
            roles,
        }
    }

    pub fn has(&self, r: Role) -> bool {
        self.roles.contains(&r)
    }

    /// Site name when the bearer is a node acting for its site.
    pub fn node_site(&self) -> Option<&str> {
        self.user.strip_prefix("node:")
    }
}

fn mac(key: &[u8]) -> HmacSha256 {
    HmacSha256::new_from_slice(key).expect("HMAC accepts any key length")
}

pub fn sign(c: &Claims, vo_secret: &[u8]) -> String {
    let payload = serde_json::to_vec(c).expect("claims serialize");
    let mut m = mac(vo_secret);
    m.update(&payload);
    format!(
        "{}.{}",
        URL_SAFE_NO_PAD.encode(&payload),
        hex::encode(m.finalize().into_bytes())
    )
}

pub fn validate_token(token: &str, vo_secret: &[u8], now_s: i64) -> Result<Claims, AuthError> {
    let (p, sig) = token.split_once('.').ok_or(AuthError::BadSignature)?;
    let payload = URL_SAFE_NO_PAD
        .decode(p)
        .map_err(|_| AuthError::BadSignature)?;
    let sig = hex::decode(sig).map_err(|_| AuthError::BadSignature)?;
    let mut m = mac(vo_secret);
    m.update(&payload);
    m.verify_slice(&sig).map_err(|_| AuthError::BadSignature)?;
    let c: Claims = serde_json::from_slice(&payload).map_err(|_| AuthError::BadSignature)?;
    if c.expires_at <= c.issued_at {
        return Err(AuthError::BadSignature);
    }
    if now_s >= c.expires_at {
        return Err(AuthError::Expired);
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct UserEntry {
    salt: Vec<u8>,
    hash: Vec<u8>,
    roles: Vec<Role>,
}

/// Flat user file, one user per line: `name:salt_hex:hash_hex:role,role`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UserDb {
    users: BTreeMap<String, UserEntry>,
}

fn password_hash(salt: &[u8], password: &str) -> Vec<u8> {
    let mut m = mac(salt);
    m.update(password.as_bytes());
    m.finalize().into_bytes().to_vec()
}

impl UserDb {
    pub fn parse(text: &str) -> Result<UserDb, String> {
        let mut db = UserDb::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || format!("users line {}: expected name:salt:hash:roles", n + 1);
            let parts: Vec<&str> = line.split(':').collect();
            let [name, salt, hash, roles] = parts[..] else {
                return Err(bad());
            };
            let roles = roles
                .split(',')
                .filter(|r| !r.is_empty())
                .map(Role::from_str)
                .collect::<Result<Vec<_>, _>>()?;
            let entry = UserEntry {
                salt: hex::decode(salt).map_err(|_| bad())?,
                hash: hex::decode(hash).map_err(|_| bad())?,
                roles,
            };
            db.users.insert(name.to_string(), entry);
        }
        Ok(db)
    }

    pub fn load(path: &Path) -> Result<UserDb, String> {
        match std::fs::read_to_string(path) {
            Ok(t) => UserDb::parse(&t),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(UserDb::default()),
            Err(e) => Err(format!("{}: {e}", path.display())),
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (name, u) in &self.users {
            let roles: Vec<String> = u.roles.iter().map(Role::to_string).collect();
            out.push_str(&format!(
                "{name}:{}:{}:{}\n",
                hex::encode(&u.salt),
                hex::encode(&u.hash),
                roles.join(",")
            ));
        }
        out
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.render())
    }

    /// Adds or replaces a user.
    pub fn add_user(
        &mut self,
        name: &str,
        password: &str,
        roles: &[Role],
        rng: &mut impl RngCore,
    ) -> Result<(), String> {
        if name.is_empty()
            || name.contains(':')
            || name.contains(char::is_whitespace)
            || name.starts_with("node:")
        {
            return Err(format!("invalid user name `{name}`"));
        }
        let mut salt = vec![0u8; 16];
        rng.fill_bytes(&mut salt);
        let hash = password_hash(&salt, password);
        self.users.insert(
            name.to_string(),
            UserEntry {
                salt,
                hash,
                roles: roles.to_vec(),
            },
        );
        Ok(())
    }

    pub fn verify(&self, name: &str, password: &str) -> Result<Vec<Role>, AuthError> {
        let u = self.users.get(name).ok_or(AuthError::UserUnknown)?;
        let mut m = mac(&u.salt);
        m.update(password.as_bytes());
        m.verify_slice(&u.hash)
            .map_err(|_| AuthError::BadCredentials)?;
        Ok(u.roles.clone())
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}
