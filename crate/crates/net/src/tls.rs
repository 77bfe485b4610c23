//! Certificates and TLS configuration.
//!
//! Servers present either a PEM certificate chain or a freshly generated
//! self-signed certificate. Clients check the server's end-entity
//! certificate against pinned SHA-256 fingerprints, validate it against CA
//! roots, or accept any certificate in [`Verify::Insecure`] mode. The TLS 1.3 handshake
//! signature is verified in both modes.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rustls::client::danger::{HandshakeSignatureValid, ServerCertVerified, ServerCertVerifier};
use rustls::client::WebPkiServerVerifier;
use rustls::crypto::{verify_tls12_signature, verify_tls13_signature, CryptoProvider, WebPkiSupportedAlgorithms};
use rustls::pki_types::pem::PemObject;
use rustls::pki_types::{CertificateDer, PrivateKeyDer, PrivatePkcs8KeyDer, ServerName, UnixTime};
use rustls::{DigitallySignedStruct, RootCertStore, SignatureScheme};
use sha2::{Digest, Sha256};

use crate::NetError;

/// SHA-256 of a DER certificate.
pub type Fingerprint = [u8; 32];

pub fn fingerprint(cert: &CertificateDer<'_>) -> Fingerprint {
    Sha256::digest(cert.as_ref()).into()
}

/// Parses a fingerprint written as 64 hex digits, with optional `:`
/// separators.
pub fn parse_fingerprint(s: &str) -> Result<Fingerprint, NetError> {
    let digits: String = s.chars().filter(|c| *c != ':').collect();
    let bytes = hex::decode(&digits).map_err(|e| NetError::Tls(format!("bad fingerprint {s:?}: {e}")))?;
    bytes
        .try_into()
        .map_err(|_| NetError::Tls(format!("fingerprint {s:?} is not 32 bytes")))
}

/// A server certificate chain and its private key.
pub struct Identity {
    chain: Vec<CertificateDer<'static>>,
    key: PrivateKeyDer<'static>,
}

impl fmt::Debug for Identity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Identity")
            .field("fingerprint", &hex::encode(self.fingerprint()))
            .finish_non_exhaustive()
    }
}

impl Clone for Identity {
    fn clone(&self) -> Self {
        Identity {
            chain: self.chain.clone(),
            key: self.key.clone_key(),
        }
    }
}

impl Identity {
    /// Generates a self-signed certificate for `names`.
    pub fn self_signed(names: &[&str]) -> Result<Self, NetError> {
        let names: Vec<String> = names.iter().map(|n| n.to_string()).collect();
        let ck = rcgen::generate_simple_self_signed(names).map_err(|e| NetError::Tls(e.to_string()))?;
        Ok(Identity {
            chain: vec![ck.cert.der().clone()],
            key: PrivateKeyDer::Pkcs8(PrivatePkcs8KeyDer::from(ck.signing_key.serialize_der())),
        })
    }

    pub fn from_pem_files(cert: &Path, key: &Path) -> Result<Self, NetError> {
        let chain = load_certificates(cert)?;
        if chain.is_empty() {
            return Err(NetError::Tls(format!("{}: no certificates", cert.display())));
        }
        let key = PrivateKeyDer::from_pem_file(key).map_err(|e| NetError::Tls(format!("{}: {e}", key.display())))?;
        Ok(Identity { chain, key })
    }

    /// Fingerprint of the end-entity certificate, for pinning.
    pub fn fingerprint(&self) -> Fingerprint {
        fingerprint(&self.chain[0])
    }
}

/// How a client checks server certificates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Verify {
    /// Accept only certificates whose fingerprint is listed.
    Pinned(Vec<Fingerprint>),
    /// Standard chain and name validation against these trust anchors.
    Roots(Vec<CertificateDer<'static>>),
    /// Accept any certificate. For tests and closed lab networks.
    Insecure,
}

/// Reads every certificate in a PEM file.
pub fn load_certificates(path: &Path) -> Result<Vec<CertificateDer<'static>>, NetError> {
    CertificateDer::pem_file_iter(path)
        .and_then(|it| it.collect::<Result<Vec<_>, _>>())
        .map_err(|e| NetError::Tls(format!("{}: {e}", path.display())))
}

pub(crate) fn provider() -> Arc<CryptoProvider> {
    Arc::new(rustls::crypto::ring::default_provider())
}

#[derive(Debug)]
struct PinVerifier {
    pins: Option<Vec<Fingerprint>>,
    algorithms: WebPkiSupportedAlgorithms,
}

impl ServerCertVerifier for PinVerifier {
    fn verify_server_cert(
        &self,
        end_entity: &CertificateDer<'_>,
        _intermediates: &[CertificateDer<'_>],
        _server_name: &ServerName<'_>,
        _ocsp_response: &[u8],
        _now: UnixTime,
    ) -> Result<ServerCertVerified, rustls::Error> {
        match &self.pins {
            Some(pins) if !pins.contains(&fingerprint(end_entity)) => Err(rustls::Error::InvalidCertificate(
                rustls::CertificateError::ApplicationVerificationFailure,
            )),
            _ => Ok(ServerCertVerified::assertion()),
        }
    }

    fn verify_tls12_signature(
        &self,
        message: &[u8],
        cert: &CertificateDer<'_>,
        dss: &DigitallySignedStruct,
    ) -> Result<HandshakeSignatureValid, rustls::Error> {
        verify_tls12_signature(message, cert, dss, &self.algorithms)
    }

    fn verify_tls13_signature(
        &self,
        message: &[u8],
        cert: &CertificateDer<'_>,
        dss: &DigitallySignedStruct,
    ) -> Result<HandshakeSignatureValid, rustls::Error> {
        verify_tls13_signature(message, cert, dss, &self.algorithms)
    }

    fn supported_verify_schemes(&self) -> Vec<SignatureScheme> {
        self.algorithms.supported_schemes()
    }
}

pub(crate) fn client_config(verify: &Verify, alpn: &[u8]) -> Result<rustls::ClientConfig, NetError> {
    let provider = provider();
    let verifier: Arc<dyn ServerCertVerifier> = match verify {
        Verify::Roots(anchors) => {
            let mut roots = RootCertStore::empty();
            for cert in anchors {
                roots.add(cert.clone()).map_err(|e| NetError::Tls(e.to_string()))?;
            }
            WebPkiServerVerifier::builder_with_provider(Arc::new(roots), provider.clone())
                .build()
                .map_err(|e| NetError::Tls(e.to_string()))?
        }
        Verify::Pinned(p) => Arc::new(PinVerifier {
            pins: Some(p.clone()),
            algorithms: provider.signature_verification_algorithms,
        }),
        Verify::Insecure => Arc::new(PinVerifier {
            pins: None,
            algorithms: provider.signature_verification_algorithms,
        }),
    };
    let mut cfg = rustls::ClientConfig::builder_with_provider(provider)
        .with_protocol_versions(&[&rustls::version::TLS13])
        .map_err(|e| NetError::Tls(e.to_string()))?
        .dangerous()
        .with_custom_certificate_verifier(verifier)
        .with_no_client_auth();
    cfg.alpn_protocols = vec![alpn.to_vec()];
    Ok(cfg)
}

pub(crate) fn server_config(identity: &Identity, alpn: &[u8]) -> Result<rustls::ServerConfig, NetError> {
    let mut cfg = rustls::ServerConfig::builder_with_provider(provider())
        .with_protocol_versions(&[&rustls::version::TLS13])
        .map_err(|e| NetError::Tls(e.to_string()))?
        .with_no_client_auth()
        .with_single_cert(identity.chain.clone(), identity.key.clone_key())
        .map_err(|e| NetError::Tls(e.to_string()))?;
    cfg.alpn_protocols = vec![alpn.to_vec()];
    Ok(cfg)
}
