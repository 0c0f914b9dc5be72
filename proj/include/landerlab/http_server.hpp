#pragma once

// Boost.Beast transport for Service: one thread per connection, plain HTTP
// plus a send-only WebSocket at /ws that relays the service's events.

#include <boost/asio/connect.hpp>
#include <boost/asio/ip/tcp.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include <atomic>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "landerlab/service.hpp"

namespace landerlab {

class HttpServer {
 public:
  using tcp = boost::asio::ip::tcp;

  HttpServer(Service& service, const std::string& host, int port)
      : service_(service), acceptor_(ioc_) {
    const tcp::endpoint ep(boost::asio::ip::make_address(host), static_cast<unsigned short>(port));
    acceptor_.open(ep.protocol());
    acceptor_.set_option(boost::asio::socket_base::reuse_address(true));
    acceptor_.bind(ep);
    acceptor_.listen();
    port_ = acceptor_.local_endpoint().port();
    host_ = host;
  }

  ~HttpServer() { stop(); }
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  int port() const { return port_; }

  void start() { accept_thread_ = std::thread([this] { accept_loop(); }); }

  // Blocks the calling thread until stop() is called from elsewhere.
  void run() {
    start();
    std::unique_lock lock(mu_);
    stopped_cv_.wait(lock, [&] { return stopping_.load(); });
  }

  void stop() {
    if (stopping_.exchange(true)) return;
    stopped_cv_.notify_all();
    // wake the blocking accept with a throwaway connection
    try {
      boost::asio::io_context ioc;
      tcp::socket s(ioc);
      s.connect(tcp::endpoint(boost::asio::ip::make_address(host_ == "0.0.0.0" ? "127.0.0.1" : host_),
                              static_cast<unsigned short>(port_)));
    } catch (const std::exception&) {
    }
    if (accept_thread_.joinable()) accept_thread_.join();
    boost::system::error_code ec;
    acceptor_.close(ec);
    service_.events().close_all();
    std::vector<std::thread> threads;
    {
      std::lock_guard lock(mu_);
      for (const auto& w : sockets_)
        if (auto s = w.lock()) s->shutdown(tcp::socket::shutdown_both, ec);
      threads.swap(threads_);
    }
    for (auto& t : threads) t.join();
  }

 private:
  void accept_loop() {
    while (!stopping_) {
      auto sock = std::make_shared<tcp::socket>(ioc_);
      boost::system::error_code ec;
      acceptor_.accept(*sock, ec);
      if (stopping_) break;
      if (ec) continue;
      std::lock_guard lock(mu_);
      sockets_.push_back(sock);
      threads_.emplace_back([this, sock] { serve(sock); });
    }
  }

  void serve(const std::shared_ptr<tcp::socket>& sock) {
    namespace http = boost::beast::http;
    namespace websocket = boost::beast::websocket;
    boost::beast::flat_buffer buffer;
    boost::system::error_code ec;
    while (!stopping_) {
      http::request<http::string_body> req;
      http::read(*sock, buffer, req, ec);
      if (ec) break;
      if (websocket::is_upgrade(req)) {
        if (req.target() == "/ws") serve_ws(*sock, req);
        break;
      }
      const std::string target(req.target());
      std::string idem;
      if (const auto it = req.find("Idempotency-Key"); it != req.end()) idem = std::string(it->value());
      const Response r = service_.handle(std::string(req.method_string()), target, req.body(), idem);
      http::response<http::string_body> res{static_cast<http::status>(r.status), req.version()};
      res.set(http::field::server, "landerlab");
      res.set(http::field::content_type, r.content_type);
      res.keep_alive(req.keep_alive());
      res.body() = r.body;
      res.prepare_payload();
      http::write(*sock, res, ec);
      if (ec || !req.keep_alive()) break;
    }
    sock->shutdown(tcp::socket::shutdown_send, ec);
  }

  void serve_ws(tcp::socket& sock, const boost::beast::http::request<boost::beast::http::string_body>& req) {
    namespace websocket = boost::beast::websocket;
    websocket::stream<tcp::socket&> ws(sock);
    boost::system::error_code ec;
    // subscribe before the handshake completes so no event after the hello is lost
    auto sub = service_.events().subscribe();
    ws.accept(req, ec);
    if (ec) {
      service_.events().unsubscribe(sub);
      return;
    }
    ws.text(true);
    const std::string hello = Json{{"schema", kEventSchemaVersion}, {"type", "hello"}}.dump();
    ws.write(boost::asio::buffer(hello), ec);
    while (!ec && !stopping_ && !sub->is_closed()) {
      if (auto msg = sub->pop()) ws.write(boost::asio::buffer(*msg), ec);
    }
    service_.events().unsubscribe(sub);
  }

  Service& service_;
  boost::asio::io_context ioc_;
  tcp::acceptor acceptor_;
  std::string host_;
  int port_ = 0;
  std::thread accept_thread_;
  std::mutex mu_;
  std::condition_variable stopped_cv_;
  std::vector<std::weak_ptr<tcp::socket>> sockets_;
  std::vector<std::thread> threads_;
  std::atomic<bool> stopping_{false};
};

}  // namespace landerlab
