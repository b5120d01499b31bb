"""Local certificate authority for TLS interception.

The proxy terminates TLS toward clients with leaf certificates minted on
demand for each intercepted host, all signed by one locally generated root
that test clients (or a user's trust store) must opt into. Leafs are cached
on disk so repeated connections skip the keygen cost.
"""

from __future__ import annotations

import datetime
import ipaddress
import ssl
import threading
from pathlib import Path

from cryptography import x509
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.x509.oid import NameOID

_ONE_DAY = datetime.timedelta(days=1)


def _new_key() -> ec.EllipticCurvePrivateKey:
    # P-256 keys mint leafs fast enough to do it per intercepted host
    return ec.generate_private_key(ec.SECP256R1())


def _name(common_name: str) -> x509.Name:
    return x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, common_name)])


def _validity() -> tuple[datetime.datetime, datetime.datetime]:
    now = datetime.datetime.now(datetime.timezone.utc)
    return now - _ONE_DAY, now + 365 * _ONE_DAY


def generate_ca(cert_path: Path, key_path: Path) -> None:
    key = _new_key()
    not_before, not_after = _validity()
    cert = (
        x509.CertificateBuilder()
        .subject_name(_name("ppx local authority"))
        .issuer_name(_name("ppx local authority"))
        .public_key(key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(not_before)
        .not_valid_after(not_after)
        .add_extension(x509.BasicConstraints(ca=True, path_length=0), critical=True)
        .add_extension(
            x509.KeyUsage(
                digital_signature=True,
                key_cert_sign=True,
                crl_sign=True,
                content_commitment=False,
                key_encipherment=False,
                data_encipherment=False,
                key_agreement=False,
                encipher_only=False,
                decipher_only=False,
            ),
            critical=True,
        )
        .sign(key, hashes.SHA256())
    )
    cert_path.parent.mkdir(parents=True, exist_ok=True)
    cert_path.write_bytes(cert.public_bytes(serialization.Encoding.PEM))
    key_path.write_bytes(
        key.private_bytes(
            serialization.Encoding.PEM,
            serialization.PrivateFormat.PKCS8,
            serialization.NoEncryption(),
        )
    )


class CertAuthority:
    """Loads (or creates) the root and mints per-host leaf contexts."""

    def __init__(self, cert_path, key_path, cache_dir=None):
        self.cert_path = Path(cert_path)
        self.key_path = Path(key_path)
        if not self.cert_path.exists() or not self.key_path.exists():
            generate_ca(self.cert_path, self.key_path)
        self.ca_cert = x509.load_pem_x509_certificate(self.cert_path.read_bytes())
        self.ca_key = serialization.load_pem_private_key(
            self.key_path.read_bytes(), password=None
        )
        self.cache_dir = Path(cache_dir) if cache_dir else self.cert_path.parent / "hosts"
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._contexts: dict[str, ssl.SSLContext] = {}

    def _issue(self, host: str) -> tuple[Path, Path]:
        safe = host.replace("*", "_wild_")
        cert_file = self.cache_dir / f"{safe}.crt"
        key_file = self.cache_dir / f"{safe}.key"
        if cert_file.exists() and key_file.exists():
            return cert_file, key_file
        key = _new_key()
        not_before, not_after = _validity()
        try:
            san: x509.GeneralName = x509.IPAddress(ipaddress.ip_address(host))
        except ValueError:
            san = x509.DNSName(host)
        cert = (
            x509.CertificateBuilder()
            .subject_name(_name(host))
            .issuer_name(self.ca_cert.subject)
            .public_key(key.public_key())
            .serial_number(x509.random_serial_number())
            .not_valid_before(not_before)
            .not_valid_after(not_after)
            .add_extension(x509.SubjectAlternativeName([san]), critical=False)
            .add_extension(x509.BasicConstraints(ca=False, path_length=None), critical=True)
            .sign(self.ca_key, hashes.SHA256())
        )
        cert_file.write_bytes(cert.public_bytes(serialization.Encoding.PEM))
        key_file.write_bytes(
            key.private_bytes(
                serialization.Encoding.PEM,
                serialization.PrivateFormat.PKCS8,
                serialization.NoEncryption(),
            )
        )
        return cert_file, key_file

    def context_for(self, host: str) -> ssl.SSLContext:
        with self._lock:
            ctx = self._contexts.get(host)
            if ctx is None:
                cert_file, key_file = self._issue(host)
                ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
                ctx.load_cert_chain(str(cert_file), str(key_file))
                self._contexts[host] = ctx
            return ctx


def upstream_context() -> ssl.SSLContext:
    """Client-side context for the proxy-to-origin leg.

    Origin certificates are deliberately not verified: the interception
    point cannot know which roots the real client would trust, and desk
    deployments talk to test origins with self-signed certificates.
    """
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
    ctx.check_hostname = False
    ctx.verify_mode = ssl.CERT_NONE
    return ctx
